//! Trajectories, movement attributes, and corpora.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::error::DataError;
use super::grid::{coarsen_cell, GridSpec};
use super::ladder::ScaleLadder;

/// Hours counted as night when deriving the home anchor: 22:00-06:00.
pub const NIGHT_HOURS: [usize; 8] = [22, 23, 0, 1, 2, 3, 4, 5];
/// Weekday working window used for the commute anchor: 09:00-17:00.
pub const WORK_HOURS: std::ops::Range<usize> = 9..17;
/// Days 0-4 of each week are weekdays.
pub const WEEKDAYS: usize = 5;

pub fn hour_of(t: usize) -> usize {
    t % 24
}

pub fn day_of(t: usize) -> usize {
    (t / 24) % 7
}

pub fn is_night(t: usize) -> bool {
    NIGHT_HOURS.contains(&hour_of(t))
}

pub fn is_weekday_work_hour(t: usize) -> bool {
    day_of(t) < WEEKDAYS && WORK_HOURS.contains(&hour_of(t))
}

/// One user's week as a fixed-length sequence of finest-grid cells, one step
/// per hour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternLabel {
    HomeStayer,
    Commuter,
    Explorer,
}

impl PatternLabel {
    pub const ALL: [PatternLabel; 3] = [
        PatternLabel::HomeStayer,
        PatternLabel::Commuter,
        PatternLabel::Explorer,
    ];

    pub fn index(&self) -> usize {
        match self {
            PatternLabel::HomeStayer => 0,
            PatternLabel::Commuter => 1,
            PatternLabel::Explorer => 2,
        }
    }
}

impl std::fmt::Display for PatternLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PatternLabel::HomeStayer => "home_stayer",
            PatternLabel::Commuter => "commuter",
            PatternLabel::Explorer => "explorer",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovementAttributes {
    pub home_cell: usize,
    pub commute_cell: usize,
    pub pattern_label: PatternLabel,
}

/// A labelled set of trajectories sharing one grid and length.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub grid: GridSpec,
    pub t_len: usize,
    pub split: Option<String>,
    pub members: Vec<(Trajectory, MovementAttributes)>,
}

impl Corpus {
    pub fn new(
        grid: GridSpec,
        t_len: usize,
        members: Vec<(Trajectory, MovementAttributes)>,
    ) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for (traj, attrs) in &members {
            if traj.cells.len() != t_len {
                return Err(DataError::LengthMismatch {
                    user: traj.user_id.clone(),
                    got: traj.cells.len(),
                    want: t_len,
                });
            }
            for &c in &traj.cells {
                if !grid.contains(c) {
                    return Err(DataError::CellOutOfRange {
                        cell: c,
                        max: grid.cell_count(),
                    });
                }
            }
            for c in [attrs.home_cell, attrs.commute_cell] {
                if !grid.contains(c) {
                    return Err(DataError::CellOutOfRange {
                        cell: c,
                        max: grid.cell_count(),
                    });
                }
            }
            if !seen.insert(traj.user_id.clone()) {
                return Err(DataError::DuplicateUserId(traj.user_id.clone()));
            }
        }
        Ok(Corpus {
            grid,
            t_len,
            split: None,
            members,
        })
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = Some(split.into());
        self
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.members.iter().map(|(t, _)| t)
    }

    /// All trajectories coarsened by `factor`, on the coarsened grid.
    pub fn coarsened(&self, factor: usize) -> Result<Corpus, DataError> {
        let coarse = self.grid.coarsened(factor)?;
        let members = self
            .members
            .iter()
            .map(|(t, a)| {
                let cells = t
                    .cells
                    .iter()
                    .map(|&c| coarsen_cell(c, &self.grid, factor))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((
                    Trajectory {
                        user_id: t.user_id.clone(),
                        cells,
                    },
                    MovementAttributes {
                        home_cell: coarsen_cell(a.home_cell, &self.grid, factor)?,
                        commute_cell: coarsen_cell(a.commute_cell, &self.grid, factor)?,
                        pattern_label: a.pattern_label,
                    },
                ))
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Corpus {
            grid: coarse,
            t_len: self.t_len,
            split: self.split.clone(),
            members,
        })
    }
}

/// Project a trajectory onto scale `k` of the ladder (1-based). Length stays
/// the same; only the spatial resolution changes.
pub fn map_to_scale(
    traj: &Trajectory,
    ladder: &ScaleLadder,
    k: usize,
) -> Result<Vec<usize>, DataError> {
    let level = ladder.level(k)?;
    if level.s == 1 {
        return Ok(traj.cells.clone());
    }
    traj.cells
        .iter()
        .map(|&c| coarsen_cell(c, &ladder.fine_grid, level.s))
        .collect()
}

/// The trajectory projected onto every scale of the ladder, coarse to fine.
pub fn scale_sequences(
    traj: &Trajectory,
    ladder: &ScaleLadder,
) -> Result<Vec<Vec<usize>>, DataError> {
    (1..=ladder.num_scales())
        .map(|k| map_to_scale(traj, ladder, k))
        .collect()
}

fn modal_cell<I: Iterator<Item = usize>>(cells: I) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in cells {
        *counts.entry(c).or_insert(0) += 1;
    }
    // BTreeMap iterates in ascending cell order, so ties resolve to the
    // lowest id.
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1))
        .map(|(c, _)| c)
}

/// Thresholds for the activity-pattern labeler.
pub const HOME_STAYER_MIN_HOME_FRACTION: f64 = 0.8;
pub const EXPLORER_MIN_DISTINCT_CELLS: usize = 25;
pub const EXPLORER_MAX_HOME_FRACTION: f64 = 0.5;

/// Derive home/commute anchors and an activity-pattern label from a raw
/// trajectory. Pure function; ties break to the lowest cell id.
pub fn derive_attributes(traj: &Trajectory) -> MovementAttributes {
    assert!(!traj.cells.is_empty(), "trajectory must be non-empty");
    let night = modal_cell(
        traj.cells
            .iter()
            .enumerate()
            .filter(|(t, _)| is_night(*t))
            .map(|(_, &c)| c),
    );
    let all_modal = modal_cell(traj.cells.iter().copied()).expect("non-empty");
    let home_cell = night.unwrap_or(all_modal);
    let work = modal_cell(
        traj.cells
            .iter()
            .enumerate()
            .filter(|(t, _)| is_weekday_work_hour(*t))
            .map(|(_, &c)| c),
    );
    let commute_cell = work.unwrap_or(home_cell);

    let home_steps = traj.cells.iter().filter(|&&c| c == home_cell).count();
    let home_fraction = home_steps as f64 / traj.cells.len() as f64;
    let distinct = traj.cells.iter().collect::<BTreeSet<_>>().len();

    let pattern_label = if home_fraction >= HOME_STAYER_MIN_HOME_FRACTION {
        PatternLabel::HomeStayer
    } else if distinct >= EXPLORER_MIN_DISTINCT_CELLS
        && home_fraction < EXPLORER_MAX_HOME_FRACTION
    {
        PatternLabel::Explorer
    } else {
        PatternLabel::Commuter
    };

    MovementAttributes {
        home_cell,
        commute_cell,
        pattern_label,
    }
}

/// Disjoint user-level partition with sizes proportional to `ratios`
/// (largest-remainder rounding), deterministic in `seed`.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(DataError::InvalidRatios(ratios));
    }
    let n = corpus.len();
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    // Distribute the remainder by descending fractional part, ties to the
    // earlier split.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let take = |idx: &[usize], tag: &str| -> Corpus {
        let mut picked: Vec<usize> = idx.to_vec();
        picked.sort_unstable();
        let members = picked
            .into_iter()
            .map(|i| corpus.members[i].clone())
            .collect();
        Corpus {
            grid: corpus.grid,
            t_len: corpus.t_len,
            split: Some(tag.to_string()),
            members,
        }
    };

    let train = take(&indices[..sizes[0]], "train");
    let val = take(&indices[sizes[0]..sizes[0] + sizes[1]], "val");
    let test = take(&indices[sizes[0] + sizes[1]..], "test");
    Ok((train, val, test))
}
