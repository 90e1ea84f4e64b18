//! Deterministic fan-out over images. Work items are independent and
//! the output lands by index, so the result does not depend on the
//! thread count; PAMDN_THREADS only controls how wide the fan-out is.

pub fn thread_count() -> usize {
    if let Ok(v) = std::env::var("PAMDN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let threads = thread_count().min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_ptr = SendPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| {
                let slot_ptr = &slot_ptr;
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let value = f(i, &items[i]);
                    // each index is claimed by exactly one worker
                    unsafe { *slot_ptr.0.add(i) = Some(value) };
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

struct SendPtr<U>(*mut Option<U>);
unsafe impl<U: Send> Sync for SendPtr<U> {}
