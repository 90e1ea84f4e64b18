use pamdn::checkpoint::load_generator;
use pamdn::synth::load_dataset;
use pamdn_core::metrics::ssim;
use pamdn_core::Tensor;

fn main() {
    let ckpt = std::env::args().nth(1).unwrap();
    let data = load_dataset(std::path::Path::new("/tmp/dry/test_data")).unwrap();
    let (gen, _) = load_generator(std::path::Path::new(&ckpt)).unwrap();
    let (mut bgm_a, mut bgs_a, mut fge_a, mut ss_a, mut ss_cap) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let n = data.pairs.len() as f64;
    for (noisy, clean) in &data.pairs {
        let (h, w) = noisy.dims2().unwrap();
        let out = gen.infer(&Tensor::from_vec(&[1, 1, h, w], noisy.data().to_vec()).unwrap()).unwrap();
        let out = Tensor::from_vec(&[h, w], out.data().to_vec()).unwrap();
        let mut bg = (0.0, 0.0, 0usize);
        let mut fg = (0.0, 0usize);
        for (&c, &o) in clean.data().iter().zip(out.data()) {
            if c < 0.05 { bg.0 += o; bg.1 += o * o; bg.2 += 1; }
            else if c >= 0.3 { fg.0 += (o - c).abs(); fg.1 += 1; }
        }
        let m = bg.0 / bg.2 as f64;
        bgm_a += m / n;
        bgs_a += (bg.1 / bg.2 as f64 - m * m).sqrt() / n;
        fge_a += fg.0 / fg.1.max(1) as f64 / n;
        ss_a += ssim(&out, clean).unwrap() / n;
        // what SSIM would this output earn with its background zeroed where clean is empty?
        let fixed = Tensor::from_vec(
            clean.shape(),
            clean.data().iter().zip(out.data()).map(|(&c, &o)| if c < 0.05 { 0.0 } else { o }).collect(),
        ).unwrap();
        ss_cap += ssim(&fixed, clean).unwrap() / n;
    }
    println!("bg mean {bgm_a:.3} std {bgs_a:.3}; fg |err| {fge_a:.3}; SSIM {ss_a:.3}; SSIM if bg perfect {ss_cap:.3}");
}
