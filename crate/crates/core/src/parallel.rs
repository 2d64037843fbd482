//! Data-parallel loop helpers.
//!
//! Kernels parallelize over disjoint output slices only; every reduction runs
//! in a fixed sequential order inside one task, so results are bit-identical
//! for any thread count. The `parallel` feature (default) backs these helpers
//! with rayon; without it everything runs sequentially. At runtime the
//! `RNA_THREADS` environment variable caps kernel parallelism (`RNA_THREADS=1`
//! forces sequential execution even in a parallel build).

#[cfg(feature = "parallel")]
use std::sync::RwLock;

#[cfg(feature = "parallel")]
static POOL: RwLock<Option<(usize, std::sync::Arc<rayon::ThreadPool>)>> = RwLock::new(None);

fn env_thread_cap() -> usize {
    match std::env::var("RNA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(0),
        Err(_) => 0,
    }
}

/// Set the kernel parallelism cap. `0` means "use all available cores".
/// Overrides `RNA_THREADS` for the rest of the process.
#[cfg(feature = "parallel")]
pub fn set_thread_cap(cap: usize) {
    let threads = if cap == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cap
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    *POOL.write().unwrap() = Some((threads, std::sync::Arc::new(pool)));
}

#[cfg(not(feature = "parallel"))]
pub fn set_thread_cap(_cap: usize) {}

/// Number of threads kernels will use.
#[cfg(feature = "parallel")]
pub fn thread_cap() -> usize {
    if let Some((n, _)) = POOL.read().unwrap().as_ref() {
        return *n;
    }
    let cap = env_thread_cap();
    if cap == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cap
    }
}

#[cfg(not(feature = "parallel"))]
pub fn thread_cap() -> usize {
    let _ = env_thread_cap();
    1
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let existing = POOL.read().unwrap().as_ref().map(|(_, p)| p.clone());
    match existing {
        Some(pool) => pool.install(f),
        None => {
            drop(existing);
            set_thread_cap(env_thread_cap());
            let pool = POOL.read().unwrap().as_ref().map(|(_, p)| p.clone()).unwrap();
            pool.install(f)
        }
    }
}

/// Run `body(i, chunk_i)` for every chunk of `out`, split into `n_tasks`
/// nearly equal pieces. Each task owns a disjoint slice, so the body may
/// write freely.
pub fn par_chunks<T: Send>(
    out: &mut [T],
    n_tasks: usize,
    body: impl Fn(usize, &mut [T]) + Sync,
) {
    let n_tasks = n_tasks.max(1);
    let chunk = out.len().div_ceil(n_tasks).max(1);
    #[cfg(feature = "parallel")]
    {
        if thread_cap() > 1 {
            with_pool(|| {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| body(i, c));
            });
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        body(i, c);
    }
}

/// Run `body(task)` for `task` in `0..n_tasks`, in parallel when enabled.
/// Tasks must touch disjoint state.
pub fn par_tasks(n_tasks: usize, body: impl Fn(usize) + Sync) {
    #[cfg(feature = "parallel")]
    {
        if thread_cap() > 1 {
            with_pool(|| {
                use rayon::prelude::*;
                (0..n_tasks).into_par_iter().for_each(|t| body(t));
            });
            return;
        }
    }
    for t in 0..n_tasks {
        body(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0u32; 103];
        par_chunks(&mut v, 7, |_, c| {
            for x in c {
                *x += 1;
            }
        });
        assert!(v.iter().all(|&x| x == 1));
    }

    #[test]
    fn task_split_is_deterministic() {
        // Same split for any thread count: chunk boundaries depend only on
        // lengths, and each chunk is filled sequentially.
        let fill = |cap: usize| {
            set_thread_cap(cap);
            let mut v = vec![0f64; 1000];
            par_chunks(&mut v, 8, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = (i * 131 + j) as f64 * 0.25;
                }
            });
            v
        };
        let a = fill(1);
        let b = fill(4);
        assert_eq!(a, b);
        set_thread_cap(0);
    }
}
