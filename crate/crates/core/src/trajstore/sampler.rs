//! Uniform K-step window sampling.

use rand::Rng;

use super::Dataset;

/// A K-step slice of one episode ending at `end`, left-padded when fewer than
/// K steps precede the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub end: usize,
    pub k: usize,
}

impl Window {
    pub fn new(episode: usize, end: usize, k: usize) -> Self {
        Self { episode, end, k }
    }

    /// Number of left-padded slots.
    pub fn pad(&self) -> usize {
        self.k.saturating_sub(self.end + 1)
    }

    /// First real episode step in the window.
    pub fn start(&self) -> usize {
        (self.end + 1).saturating_sub(self.k)
    }

    /// Episode step per slot, `None` for padding.
    pub fn steps(&self) -> Vec<Option<usize>> {
        let pad = self.pad();
        (0..self.k)
            .map(|i| {
                if i < pad {
                    None
                } else {
                    Some(self.start() + i - pad)
                }
            })
            .collect()
    }

    /// True at padded slots.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.k).map(|i| i < self.pad()).collect()
    }
}

/// Draws `batch` windows with end positions uniform over every step of every
/// episode.
pub fn sample_windows<R: Rng + ?Sized>(
    dataset: &Dataset,
    k: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<Window> {
    assert!(k >= 1, "window length must be positive");
    let total = dataset.total_steps();
    (0..batch)
        .map(|_| {
            let (episode, end) = dataset.locate(rng.random_range(0..total));
            Window::new(episode, end, k)
        })
        .collect()
}
