//! Index-ordered parallel map.
//!
//! With the `parallel` feature the closure runs on the current rayon pool;
//! otherwise serially. The output vector is always in index order, so any
//! reduction done afterwards is independent of scheduling.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Like [`map_indexed`] for fallible tasks; the error of the lowest failing
/// index is reported, wrapped with that index.
pub fn try_map_indexed<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results = map_indexed(count, f);
    let mut out = Vec::with_capacity(count);
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => return Err(Error::Replicate { index, source: alloc::boxed::Box::new(e) }),
        }
    }
    Ok(out)
}
