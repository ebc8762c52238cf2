//! Threaded evaluation of the per-modality gradients of a parallel step.

use std::num::NonZeroUsize;
use std::thread;

use pangaea_core::pretrain::{modality_gradients, ModalityJob};
use pangaea_core::tensor::Gradients;
use pangaea_core::transformer::ModelState;

/// Worker cap from `PANGAEA_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("PANGAEA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Losses and mean gradient of `jobs`, computed on up to `threads` workers.
/// Results are averaged in job order, so the outcome does not depend on the
/// worker count.
pub fn parallel_gradients(
    model: &ModelState,
    jobs: &[ModalityJob<'_>],
    threads: usize,
) -> pangaea_core::Result<(Vec<f64>, Gradients)> {
    let threads = threads.clamp(1, jobs.len().max(1));
    let parts: Vec<pangaea_core::Result<(f64, Gradients)>> = if threads == 1 {
        jobs.iter().map(|j| modality_gradients(model, j)).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|j| modality_gradients(model, j)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let parts = parts.into_iter().collect::<pangaea_core::Result<Vec<_>>>()?;
    let losses = parts.iter().map(|p| p.0).collect();
    let grads: Vec<Gradients> = parts.into_iter().map(|p| p.1).collect();
    Ok((losses, Gradients::mean_of(&grads)))
}
