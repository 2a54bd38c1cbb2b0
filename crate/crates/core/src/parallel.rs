//! Data-parallel helpers.
//!
//! With the `parallel` feature these fan out over the rayon pool; without it
//! they run in order on the calling thread. Both variants hand back results
//! in index order, so reductions done by the caller over the returned values
//! are bit-identical between builds.

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    pub fn num_threads() -> usize {
        rayon::current_num_threads()
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    pub fn num_threads() -> usize {
        1
    }
}

pub use actual::{for_each_chunk, map_collect, num_threads};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_in_index_order() {
        let v = map_collect(100, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }

    #[test]
    fn chunks_see_their_index() {
        let mut v = vec![0usize; 12];
        for_each_chunk(&mut v, 4, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
