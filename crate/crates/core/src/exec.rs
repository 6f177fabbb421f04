//! Per-bias-point execution, sequential or data-parallel.
//!
//! Both paths hand the per-point results to the fold in point order, so the
//! floating-point results do not depend on the mode or the thread count.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when built with the `parallel` feature, and runs
    /// sequentially otherwise.
    #[default]
    Parallel,
}

impl Exec {
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// The mode that will actually run.
    pub fn effective(self) -> Exec {
        if Self::parallel_available() {
            self
        } else {
            Exec::Sequential
        }
    }
}

/// Runs `point` for `0..n` and folds the results in index order.
pub(crate) fn fold_points<W, T, A>(
    exec: Exec,
    n: usize,
    workspace: impl Fn() -> W + Sync + Send,
    point: impl Fn(&mut W, usize) -> Result<T> + Sync + Send,
    acc: &mut A,
    mut fold: impl FnMut(&mut A, T),
) -> Result<()>
where
    T: Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && n > 1 {
        use rayon::prelude::*;
        let items: Vec<T> = (0..n)
            .into_par_iter()
            .map_init(workspace, |w, j| point(w, j))
            .collect::<Result<_>>()?;
        for t in items {
            fold(acc, t);
        }
        return Ok(());
    }
    let _ = exec;
    let mut w = workspace();
    for j in 0..n {
        let t = point(&mut w, j)?;
        fold(acc, t);
    }
    Ok(())
}
