use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{stationary_distribution, ChainError, GeneratorMatrix, SwitchingPath};

/// Map from flat state index `s_ij` to `(block i, within-block index j)`.
///
/// Flat states are laid out block by block: block 0 first, then block 1, ...
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    block_sizes: Vec<usize>,
    entries: Vec<(usize, usize)>,
}

impl Partition {
    pub fn from_block_sizes(block_sizes: &[usize]) -> Self {
        let entries = block_sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &m)| (0..m).map(move |j| (i, j)))
            .collect();
        Self {
            block_sizes: block_sizes.to_vec(),
            entries,
        }
    }

    /// Every state in its own block.
    pub fn identity(m: usize) -> Self {
        Self::from_block_sizes(&vec![1; m])
    }

    pub fn num_states(&self) -> usize {
        self.entries.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn block_of(&self, state: usize) -> Result<usize, ChainError> {
        self.entries
            .get(state)
            .map(|&(i, _)| i)
            .ok_or(ChainError::UnknownState(state))
    }

    pub fn locate(&self, state: usize) -> Result<(usize, usize), ChainError> {
        self.entries
            .get(state)
            .copied()
            .ok_or(ChainError::UnknownState(state))
    }

    /// Flat index of `s_ij`.
    pub fn flat(&self, block: usize, index: usize) -> usize {
        self.block_sizes[..block].iter().sum::<usize>() + index
    }

    /// Flat indices of the states in `block`.
    pub fn block_states(&self, block: usize) -> std::ops::Range<usize> {
        let start = self.flat(block, 0);
        start..start + self.block_sizes[block]
    }
}

/// Nearly decomposable generator `Q^ε = Q̃/ε + Q̂` with `Q̃ = diag[Q̃^1, …, Q̃^l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleSpec {
    blocks: Vec<GeneratorMatrix>,
    slow: DMatrix<f64>,
    epsilon: f64,
    partition: Partition,
}

impl TwoScaleSpec {
    /// Checks block irreducibility, `Q̂` shape and row sums, and `ε > 0`.
    ///
    /// The sign pattern of `Q̂` is not checked here; only the assembled
    /// `Q^ε` must be a valid generator (see [`build_fast_generator`]).
    pub fn new(
        blocks: Vec<GeneratorMatrix>,
        slow: DMatrix<f64>,
        epsilon: f64,
    ) -> Result<Self, ChainError> {
        if blocks.is_empty() {
            return Err(ChainError::InvalidTwoScale("no blocks".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if !b.is_irreducible() {
                return Err(ChainError::ReducibleBlock(i));
            }
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(ChainError::InvalidTwoScale(format!(
                "epsilon {epsilon} must be positive"
            )));
        }
        let sizes: Vec<usize> = blocks.iter().map(GeneratorMatrix::size).collect();
        let partition = Partition::from_block_sizes(&sizes);
        let m0 = partition.num_states();
        if slow.shape() != (m0, m0) {
            return Err(ChainError::InvalidTwoScale(format!(
                "slow generator is {:?}, expected {m0}x{m0}",
                slow.shape()
            )));
        }
        if slow.iter().any(|v| !v.is_finite()) {
            return Err(ChainError::NonFiniteEntry);
        }
        for i in 0..m0 {
            let s = slow.row(i).sum();
            if s.abs() > 1e-12 * slow.row(i).amax().max(1.0) {
                return Err(ChainError::InvalidTwoScale(format!(
                    "slow generator row {i} sums to {s}"
                )));
            }
        }
        Ok(Self {
            blocks,
            slow,
            epsilon,
            partition,
        })
    }

    pub fn from_rows(
        blocks: &[Vec<Vec<f64>>],
        slow: &[Vec<f64>],
        epsilon: f64,
    ) -> Result<Self, ChainError> {
        let blocks = blocks
            .iter()
            .map(|b| GeneratorMatrix::from_rows(b))
            .collect::<Result<Vec<_>, _>>()?;
        let m0 = slow.len();
        if slow.iter().any(|r| r.len() != m0) {
            return Err(ChainError::NonSquare {
                rows: m0,
                cols: slow.iter().map(Vec::len).max().unwrap_or(0),
            });
        }
        Self::new(blocks, DMatrix::from_fn(m0, m0, |i, j| slow[i][j]), epsilon)
    }

    /// The same spec at a different scale.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, ChainError> {
        Self::new(self.blocks.clone(), self.slow.clone(), epsilon)
    }

    pub fn blocks(&self) -> &[GeneratorMatrix] {
        &self.blocks
    }

    pub fn slow(&self) -> &DMatrix<f64> {
        &self.slow
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn num_states(&self) -> usize {
        self.partition.num_states()
    }
}

/// Assembles `Q^ε = Q̃/ε + Q̂` in flat indexing.
pub fn build_fast_generator(spec: &TwoScaleSpec) -> Result<GeneratorMatrix, ChainError> {
    let m0 = spec.num_states();
    let mut q = spec.slow.clone();
    for (i, block) in spec.blocks.iter().enumerate() {
        let offset = spec.partition.flat(i, 0);
        for a in 0..block.size() {
            for b in 0..block.size() {
                q[(offset + a, offset + b)] += block.rate(a, b) / spec.epsilon;
            }
        }
    }
    for i in 0..m0 {
        for j in 0..m0 {
            if i != j && q[(i, j)] < 0.0 {
                return Err(ChainError::InvalidCombination {
                    row: i,
                    col: j,
                    value: q[(i, j)],
                });
            }
        }
    }
    GeneratorMatrix::new(q)
}

/// Stationary rows of the fast blocks and the aggregated generator `Q̄ = ν̃ Q̂ 𝟙`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub nus: Vec<Vec<f64>>,
    pub partition: Partition,
    pub q_bar: GeneratorMatrix,
}

impl AggregationResult {
    /// `ν̃` as an `l × m0` block-diagonal matrix.
    pub fn nu_tilde(&self) -> DMatrix<f64> {
        let l = self.partition.num_blocks();
        let m0 = self.partition.num_states();
        let mut out = DMatrix::zeros(l, m0);
        for (i, nu) in self.nus.iter().enumerate() {
            for (j, &v) in nu.iter().enumerate() {
                out[(i, self.partition.flat(i, j))] = v;
            }
        }
        out
    }

    /// Stationary weight `ν_{s_ij}` of a flat state.
    pub fn weight(&self, state: usize) -> Result<f64, ChainError> {
        let (i, j) = self.partition.locate(state)?;
        Ok(self.nus[i][j])
    }
}

pub fn aggregate(spec: &TwoScaleSpec) -> Result<AggregationResult, ChainError> {
    let nus = spec
        .blocks
        .iter()
        .map(stationary_distribution)
        .collect::<Result<Vec<_>, _>>()?;
    let l = spec.partition.num_blocks();
    let m0 = spec.num_states();
    let mut ones = DMatrix::zeros(m0, l);
    for s in 0..m0 {
        let (i, _) = spec.partition.locate(s)?;
        ones[(s, i)] = 1.0;
    }
    let result = AggregationResult {
        nus,
        partition: spec.partition.clone(),
        q_bar: GeneratorMatrix::zero(l),
    };
    let mut q_bar = result.nu_tilde() * &spec.slow * ones;
    // rounding can leave -1e-17 where an off-diagonal rate is exactly zero
    for i in 0..l {
        for j in 0..l {
            if i != j && q_bar[(i, j)] < 0.0 && q_bar[(i, j)] > -1e-12 {
                q_bar[(i, j)] = 0.0;
            }
        }
    }
    Ok(AggregationResult {
        q_bar: GeneratorMatrix::new(q_bar)?,
        ..result
    })
}

/// Lumps a path over the flat states into a path over blocks.
pub fn project_path(path: &SwitchingPath, partition: &Partition) -> Result<SwitchingPath, ChainError> {
    let initial = partition.block_of(path.initial_state())?;
    let mut jumps = Vec::new();
    let mut current = initial;
    for (t, _, to) in path.jumps() {
        let b = partition.block_of(to)?;
        if b != current {
            jumps.push((t, b));
            current = b;
        }
    }
    SwitchingPath::new(path.horizon(), initial, jumps)
}

/// `∫_0^T [1(fast(s) = s_ij) - ν_ij 1(agg(s) = i)] ds`, exact from the jump lists.
pub fn occupation_residual(
    fast: &SwitchingPath,
    agg: &SwitchingPath,
    aggregation: &AggregationResult,
    state: usize,
    horizon: f64,
) -> Result<f64, ChainError> {
    if horizon > fast.horizon() || horizon < 0.0 {
        return Err(ChainError::TimeOutOfRange {
            t: horizon,
            horizon: fast.horizon(),
        });
    }
    if project_path(fast, &aggregation.partition)? != *agg {
        return Err(ChainError::PathMismatch);
    }
    let (block, _) = aggregation.partition.locate(state)?;
    let nu = aggregation.weight(state)?;
    Ok(fast.occupation(state, horizon) - nu * agg.occupation(block, horizon))
}
