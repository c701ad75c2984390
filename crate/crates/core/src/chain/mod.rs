//! Finite-state continuous-time Markov chains: generators, exact path
//! sampling, jump-count martingales and two-time-scale aggregation.

mod aggregation;
mod generator;
mod path;

use thiserror::Error;

pub use aggregation::{
    aggregate, build_fast_generator, occupation_residual, project_path, AggregationResult,
    Partition, TwoScaleSpec,
};
pub use generator::{
    stationary_distribution, stationary_residual, transition_matrix, validate_generator,
    GeneratorMatrix, ROW_SUM_TOL, SOLVE_RESIDUAL_TOL,
};
pub use path::{martingale_decomposition, sample_path, MartingaleDecomposition, SwitchingPath};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("generator is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("negative off-diagonal rate at ({0}, {1})")]
    NegativeOffDiagonal(usize, usize),
    #[error("non-finite entry in rate matrix")]
    NonFiniteEntry,
    #[error("stationary distribution is not unique (null space dimension {nullity})")]
    NotUnique { nullity: usize },
    #[error("stationary solve residual {0:e} exceeds tolerance")]
    ResidualTooLarge(f64),
    #[error("time {0} must be nonnegative and finite")]
    NegativeTime(f64),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid switching path: {0}")]
    InvalidPath(String),
    #[error("unknown state {0}")]
    UnknownState(usize),
    #[error("Q^eps has negative off-diagonal entry {value} at ({row}, {col})")]
    InvalidCombination { row: usize, col: usize, value: f64 },
    #[error("fast block {0} is not irreducible")]
    ReducibleBlock(usize),
    #[error("invalid two-scale spec: {0}")]
    InvalidTwoScale(String),
    #[error("aggregated path is not the projection of the fast path")]
    PathMismatch,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worked_spec(eps: f64) -> TwoScaleSpec {
        TwoScaleSpec::from_rows(
            &[
                vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
                vec![vec![-2.0, 2.0], vec![2.0, -2.0]],
            ],
            &[
                vec![-1.0, 0.0, 1.0, 0.0],
                vec![0.0, -1.0, 0.0, 1.0],
                vec![1.0, 0.0, -1.0, 0.0],
                vec![0.0, 1.0, 0.0, -1.0],
            ],
            eps,
        )
        .unwrap()
    }

    #[test]
    fn validate_accepts_and_rejects() {
        let q = validate_generator(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(q.to_rows(), vec![vec![-1.0, 1.0], vec![2.0, -2.0]]);
        let z = validate_generator(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(z, GeneratorMatrix::zero(2));
        assert_eq!(
            validate_generator(&[vec![-1.0, -1.0], vec![2.0, -2.0]]),
            Err(ChainError::NegativeOffDiagonal(0, 1))
        );
        assert!(matches!(
            validate_generator(&[vec![0.0, 1.0]]),
            Err(ChainError::NonSquare { .. })
        ));
        assert_eq!(
            validate_generator(&[vec![0.0, f64::NAN], vec![0.0, 0.0]]),
            Err(ChainError::NonFiniteEntry)
        );
        // diagonal is renormalized
        let q = validate_generator(&[vec![5.0, 0.3, 0.2], vec![0.1, 0.0, 0.7], vec![0.0, 0.0, 9.0]])
            .unwrap();
        assert!(q.max_row_sum() <= ROW_SUM_TOL);
    }

    #[test]
    fn stationary_examples() {
        let q = validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let nu = stationary_distribution(&q).unwrap();
        assert_abs_diff_eq!(nu[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[1], 0.5, epsilon = 1e-12);

        // νQ = 0 by hand: -2ν0 + ν1 = 0, ν0 + ν1 = 1 → (1/3, 2/3)
        let q = validate_generator(&[vec![-2.0, 2.0], vec![1.0, -1.0]]).unwrap();
        let nu = stationary_distribution(&q).unwrap();
        assert_abs_diff_eq!(nu[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[1], 2.0 / 3.0, epsilon = 1e-12);

        assert!(matches!(
            stationary_distribution(&GeneratorMatrix::zero(2)),
            Err(ChainError::NotUnique { .. })
        ));
    }

    #[test]
    fn stationary_with_transient_state_is_unique() {
        let q = validate_generator(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 3.0, 0.0],
        ])
        .unwrap();
        let nu = stationary_distribution(&q).unwrap();
        assert_abs_diff_eq!(nu[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[1], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[2], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn transition_matrix_examples() {
        let q = validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let p0 = transition_matrix(&q, 0.0).unwrap();
        assert_eq!(p0, nalgebra::DMatrix::identity(2, 2));
        for &t in &[0.1, 0.7, 1.0, 3.0, 25.0] {
            let p = transition_matrix(&q, t).unwrap();
            assert_abs_diff_eq!(p[(0, 0)], (1.0 + (-2.0 * t).exp()) / 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p[(0, 1)], (1.0 - (-2.0 * t).exp()) / 2.0, epsilon = 1e-12);
        }
        let z = transition_matrix(&GeneratorMatrix::zero(3), 17.0).unwrap();
        assert_eq!(z, nalgebra::DMatrix::identity(3, 3));
        assert!(transition_matrix(&q, -1.0).is_err());
    }

    #[test]
    fn zero_generator_path_has_no_jumps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_path(&GeneratorMatrix::zero(3), 2, 10.0, &mut rng).unwrap();
        assert_eq!(p.num_jumps(), 0);
        assert_eq!(p.state_at(10.0), 2);
    }

    #[test]
    fn path_evaluation_is_cadlag() {
        let p = SwitchingPath::new(3.0, 0, [(1.0, 1), (2.0, 0)]).unwrap();
        assert_eq!(p.state_at(0.999), 0);
        assert_eq!(p.state_at(1.0), 1);
        assert_eq!(p.state_before(1.0), 0);
        assert_eq!(p.state_at(2.5), 0);
        assert_abs_diff_eq!(p.occupation(0, 3.0), 2.0);
        assert_abs_diff_eq!(p.occupation(1, 1.5), 0.5);
        assert!(SwitchingPath::new(3.0, 0, [(1.0, 0)]).is_err());
        assert!(SwitchingPath::new(3.0, 0, [(1.0, 1), (0.5, 0)]).is_err());
        assert!(SwitchingPath::new(3.0, 0, [(4.0, 1)]).is_err());
        let csv = p.to_csv();
        assert_eq!(csv, "jump_time,state\n0,0\n1.0,1\n2.0,0\n");
    }

    #[test]
    fn martingale_decomposition_examples() {
        let q = validate_generator(&[vec![-2.0, 2.0], vec![0.5, -0.5]]).unwrap();
        let constant = SwitchingPath::constant(4.0, 0);
        let d = martingale_decomposition(&constant, &q, (0, 1), 3.0).unwrap();
        assert_abs_diff_eq!(d.martingale(), -2.0 * 3.0);

        let one = SwitchingPath::new(4.0, 0, [(1.25, 1)]).unwrap();
        let d = martingale_decomposition(&one, &q, (0, 1), 3.0).unwrap();
        assert_eq!(d.optional_variation, 1);
        assert_abs_diff_eq!(d.martingale(), 1.0 - 2.0 * 1.25);

        let d = martingale_decomposition(&one, &q, (1, 1), 3.0).unwrap();
        assert_eq!(d.martingale(), 0.0);
        assert!(matches!(
            martingale_decomposition(&one, &q, (0, 1), 4.5),
            Err(ChainError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn fast_generator_examples() {
        let spec = TwoScaleSpec::new(
            vec![
                validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
                validate_generator(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap(),
            ],
            nalgebra::DMatrix::zeros(4, 4),
            0.5,
        )
        .unwrap();
        let q = build_fast_generator(&spec).unwrap();
        assert_eq!(
            q.to_rows(),
            vec![
                vec![-2.0, 2.0, 0.0, 0.0],
                vec![2.0, -2.0, 0.0, 0.0],
                vec![0.0, 0.0, -4.0, 4.0],
                vec![0.0, 0.0, 4.0, -4.0],
            ]
        );

        let q = build_fast_generator(&worked_spec(0.1)).unwrap();
        assert_abs_diff_eq!(q.rate(0, 1), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.rate(0, 2), 1.0, epsilon = 1e-12);

        let bad = TwoScaleSpec::from_rows(
            &[vec![vec![-1.0, 1.0], vec![1.0, -1.0]]],
            &[vec![5.0, -5.0], vec![0.0, 0.0]],
            1.0,
        )
        .unwrap();
        assert!(matches!(
            build_fast_generator(&bad),
            Err(ChainError::InvalidCombination { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let agg = aggregate(&worked_spec(0.1)).unwrap();
        assert_eq!(agg.q_bar.to_rows(), vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);

        let zero = TwoScaleSpec::new(
            worked_spec(0.1).blocks().to_vec(),
            nalgebra::DMatrix::zeros(4, 4),
            0.1,
        )
        .unwrap();
        assert_eq!(aggregate(&zero).unwrap().q_bar, GeneratorMatrix::zero(2));

        let single = TwoScaleSpec::from_rows(
            &[vec![vec![-1.0, 1.0], vec![3.0, -3.0]]],
            &[vec![-0.5, 0.5], vec![0.25, -0.25]],
            0.1,
        )
        .unwrap();
        assert_eq!(aggregate(&single).unwrap().q_bar, GeneratorMatrix::zero(1));
    }

    #[test]
    fn reducible_block_rejected() {
        let r = TwoScaleSpec::from_rows(
            &[vec![vec![0.0, 0.0], vec![1.0, -1.0]]],
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            0.1,
        );
        assert_eq!(r, Err(ChainError::ReducibleBlock(0)));
    }

    #[test]
    fn project_path_examples() {
        let partition = Partition::from_block_sizes(&[2, 2]);
        let inside = SwitchingPath::new(5.0, 0, [(1.0, 1), (2.0, 0)]).unwrap();
        assert_eq!(
            project_path(&inside, &partition).unwrap(),
            SwitchingPath::constant(5.0, 0)
        );
        let cross = SwitchingPath::new(5.0, 0, [(1.0, 1), (2.5, 2)]).unwrap();
        let p = project_path(&cross, &partition).unwrap();
        assert_eq!(p.jump_times(), &[2.5]);
        assert_eq!(p.states(), &[0, 1]);

        let ident = Partition::identity(4);
        assert_eq!(project_path(&cross, &ident).unwrap(), cross);

        let out = SwitchingPath::new(5.0, 0, [(1.0, 7)]).unwrap();
        assert_eq!(
            project_path(&out, &partition),
            Err(ChainError::UnknownState(7))
        );
    }

    #[test]
    fn occupation_residual_examples() {
        let single = TwoScaleSpec::from_rows(
            &[vec![vec![0.0]], vec![vec![-1.0, 1.0], vec![1.0, -1.0]]],
            &[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]],
            0.1,
        )
        .unwrap();
        let agg = aggregate(&single).unwrap();
        let fast = SwitchingPath::constant(2.0, 0);
        let lumped = project_path(&fast, &agg.partition).unwrap();
        assert_abs_diff_eq!(
            occupation_residual(&fast, &lumped, &agg, 0, 2.0).unwrap(),
            0.0
        );

        let fast = SwitchingPath::constant(2.0, 1);
        let lumped = project_path(&fast, &agg.partition).unwrap();
        assert_abs_diff_eq!(
            occupation_residual(&fast, &lumped, &agg, 1, 2.0).unwrap(),
            0.5 * 2.0,
            epsilon = 1e-12
        );
        assert_eq!(
            occupation_residual(&fast, &SwitchingPath::constant(2.0, 0), &agg, 1, 2.0),
            Err(ChainError::PathMismatch)
        );
    }
}
