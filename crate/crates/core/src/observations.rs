//! Detected checkerboard corners, indexed by viewpoint, frame and board
//! point.
//!
//! Storage is dense: one optional pixel per `(viewpoint, frame, point)` slot.
//! A missing slot means the corner was not detected in that view. Iteration
//! order is always viewpoint-major, then frame, then point, so everything
//! downstream (residual ordering, file layout, noise streams) is
//! reproducible.

use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("board must have at least 2x2 points and positive spacing")]
    InvalidBoard,
    #[error("viewpoint {i} frame {j} has {got} points; a usable frame needs at least {needed}")]
    SparseFrame { i: usize, j: usize, got: usize, needed: usize },
    #[error("viewpoint 0 does not observe frame {j}; every frame must be anchored there")]
    UnanchoredFrame { j: usize },
    #[error("observation set is empty")]
    Empty,
}

/// Planar calibration target: `rows x cols` corners on a square grid.
///
/// Point `k` sits at row `k / cols`, column `k % cols`, i.e. the model
/// position is `(col * spacing, row * spacing, 0)` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_mm: f64,
}

impl BoardSpec {
    pub fn point_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn model_points(&self) -> Vec<Point2> {
        let mut pts = Vec::with_capacity(self.point_count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                pts.push(Point2::new(c as f64 * self.spacing_mm, r as f64 * self.spacing_mm));
            }
        }
        pts
    }

    pub fn validate(&self) -> Result<(), ObservationError> {
        if self.rows < 2 || self.cols < 2 || self.spacing_mm <= 0.0 || !self.spacing_mm.is_finite()
        {
            return Err(ObservationError::InvalidBoard);
        }
        Ok(())
    }
}

/// Corner detections for a whole capture session.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    board: BoardSpec,
    n_viewpoints: usize,
    n_frames: usize,
    board_points: Vec<Point2>,
    data: Vec<Option<Point2>>,
}

impl ObservationSet {
    pub fn new(board: BoardSpec, n_viewpoints: usize, n_frames: usize) -> Self {
        let m = board.point_count();
        Self {
            board,
            n_viewpoints,
            n_frames,
            board_points: board.model_points(),
            data: vec![None; n_viewpoints * n_frames * m],
        }
    }

    pub fn board(&self) -> BoardSpec {
        self.board
    }

    pub fn n_viewpoints(&self) -> usize {
        self.n_viewpoints
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Model-plane positions of the board corners, index-aligned with `k`.
    pub fn board_points(&self) -> &[Point2] {
        &self.board_points
    }

    fn slot(&self, i: usize, j: usize, k: usize) -> usize {
        assert!(i < self.n_viewpoints && j < self.n_frames && k < self.board.point_count());
        (i * self.n_frames + j) * self.board.point_count() + k
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, p: Point2) {
        let s = self.slot(i, j, k);
        self.data[s] = Some(p);
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<Point2> {
        self.data[self.slot(i, j, k)]
    }

    /// Number of stored observations.
    pub fn len(&self) -> usize {
        self.data.iter().filter(|d| d.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|d| d.is_none())
    }

    /// All observations in `(viewpoint, frame, point)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, Point2)> + '_ {
        let m = self.board.point_count();
        let t = self.n_frames;
        self.data.iter().enumerate().filter_map(move |(s, d)| {
            d.map(|p| {
                let k = s % m;
                let j = (s / m) % t;
                let i = s / (m * t);
                (i, j, k, p)
            })
        })
    }

    /// Points seen by viewpoint `i` in frame `j`, with their board indices.
    pub fn frame_points(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, Point2)> + '_ {
        let base = self.slot(i, j, 0);
        let m = self.board.point_count();
        self.data[base..base + m]
            .iter()
            .enumerate()
            .filter_map(|(k, d)| d.map(|p| (k, p)))
    }

    pub fn count_in(&self, i: usize, j: usize) -> usize {
        self.frame_points(i, j).count()
    }

    /// Single-viewpoint subset with unobserved frames dropped. Returns the
    /// subset and the mapping from its frame indices back to this set's.
    pub fn viewpoint_subset(&self, i: usize) -> (ObservationSet, Vec<usize>) {
        let frames: Vec<usize> = (0..self.n_frames).filter(|&j| self.count_in(i, j) > 0).collect();
        let mut sub = ObservationSet::new(self.board, 1, frames.len());
        for (new_j, &old_j) in frames.iter().enumerate() {
            for (k, p) in self.frame_points(i, old_j) {
                sub.set(0, new_j, k, p);
            }
        }
        (sub, frames)
    }

    /// Checks the preconditions shared by the calibration entry points:
    /// every observed frame carries enough points for a homography, and
    /// viewpoint 0 sees every frame so board poses stay anchored to it.
    pub fn validate_for_calibration(&self) -> Result<(), ObservationError> {
        self.board.validate()?;
        if self.n_viewpoints == 0 || self.n_frames == 0 || self.is_empty() {
            return Err(ObservationError::Empty);
        }
        for j in 0..self.n_frames {
            if self.count_in(0, j) < 4 {
                return Err(ObservationError::UnanchoredFrame { j });
            }
        }
        for i in 0..self.n_viewpoints {
            for j in 0..self.n_frames {
                let got = self.count_in(i, j);
                if got > 0 && got < 4 {
                    return Err(ObservationError::SparseFrame { i, j, got, needed: 4 });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board() -> BoardSpec {
        BoardSpec { rows: 3, cols: 4, spacing_mm: 20.0 }
    }

    #[test]
    fn board_points_are_row_major() {
        let pts = board().model_points();
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[0], Point2::new(0.0, 0.0));
        assert_eq!(pts[3], Point2::new(60.0, 0.0));
        assert_eq!(pts[4], Point2::new(0.0, 20.0));
        assert_eq!(pts[11], Point2::new(60.0, 40.0));
    }

    #[test]
    fn iteration_is_viewpoint_major() {
        let mut obs = ObservationSet::new(board(), 2, 2);
        obs.set(1, 0, 2, Point2::new(1.0, 1.0));
        obs.set(0, 1, 0, Point2::new(2.0, 2.0));
        obs.set(0, 0, 5, Point2::new(3.0, 3.0));
        let order: Vec<(usize, usize, usize)> =
            obs.iter().map(|(i, j, k, _)| (i, j, k)).collect();
        assert_eq!(order, vec![(0, 0, 5), (0, 1, 0), (1, 0, 2)]);
    }

    #[test]
    fn subset_compacts_unobserved_frames() {
        let mut obs = ObservationSet::new(board(), 2, 3);
        for k in 0..4 {
            obs.set(1, 0, k, Point2::new(k as f64, 0.0));
            obs.set(1, 2, k, Point2::new(k as f64, 2.0));
        }
        let (sub, map) = obs.viewpoint_subset(1);
        assert_eq!(sub.n_viewpoints(), 1);
        assert_eq!(sub.n_frames(), 2);
        assert_eq!(map, vec![0, 2]);
        assert_eq!(sub.get(0, 1, 3), Some(Point2::new(3.0, 2.0)));
    }

    #[test]
    fn validation_flags_missing_anchor() {
        let mut obs = ObservationSet::new(board(), 1, 2);
        for k in 0..4 {
            obs.set(0, 0, k, Point2::new(k as f64, 0.0));
        }
        // Frame 1 never observed by viewpoint 0.
        assert!(matches!(
            obs.validate_for_calibration(),
            Err(ObservationError::UnanchoredFrame { j: 1 })
        ));
    }

    #[test]
    fn validation_flags_sparse_frames() {
        let mut obs = ObservationSet::new(board(), 2, 1);
        for k in 0..4 {
            obs.set(0, 0, k, Point2::new(k as f64, 0.0));
        }
        obs.set(1, 0, 0, Point2::new(0.0, 0.0));
        obs.set(1, 0, 1, Point2::new(1.0, 0.0));
        assert!(matches!(
            obs.validate_for_calibration(),
            Err(ObservationError::SparseFrame { i: 1, j: 0, got: 2, needed: 4 })
        ));
    }

    #[test]
    fn len_counts_only_present_slots() {
        let mut obs = ObservationSet::new(board(), 1, 1);
        assert!(obs.is_empty());
        obs.set(0, 0, 0, Point2::new(0.0, 0.0));
        obs.set(0, 0, 0, Point2::new(1.0, 0.0));
        assert_eq!(obs.len(), 1);
        assert_eq!(obs.get(0, 0, 0), Some(Point2::new(1.0, 0.0)));
    }
}
