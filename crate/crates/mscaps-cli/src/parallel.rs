use mscaps_core::runner::{BatchRunner, SequentialRunner};
use rayon::prelude::*;

/// Fans independent jobs across the rayon pool; results keep index order,
/// so outputs are bit-identical to sequential execution.
pub struct RayonRunner;

impl BatchRunner for RayonRunner {
    fn run<T: Send>(&self, count: usize, job: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..count).into_par_iter().map(job).collect()
    }
}

/// Runner selected by `--deterministic`: sequential when set, parallel
/// otherwise.
pub enum Exec {
    Sequential(SequentialRunner),
    Parallel(RayonRunner),
}

impl Exec {
    pub fn new(deterministic: bool) -> Exec {
        if deterministic {
            Exec::Sequential(SequentialRunner)
        } else {
            Exec::Parallel(RayonRunner)
        }
    }
}

impl BatchRunner for Exec {
    fn run<T: Send>(&self, count: usize, job: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        match self {
            Exec::Sequential(r) => r.run(count, job),
            Exec::Parallel(r) => r.run(count, job),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_results_keep_index_order() {
        let seq = SequentialRunner.run(257, &|k| k * k + 1);
        let par = RayonRunner.run(257, &|k| k * k + 1);
        assert_eq!(seq, par);
    }
}
