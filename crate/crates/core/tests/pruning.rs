//! Parameter counts, plan application and the budget filter.

mod common;

use std::collections::BTreeMap;

use hybridprune::model::params::param_count;
use hybridprune::pruner::{
    apply_plan, rank_group_constrained, target_config, MambaKeep, PrunePlan, PruneTargets,
};
use hybridprune::search::{enumerate_candidates, SearchGrid};
use hybridprune::{HybridModel, LayerKind, ModelConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_count_matches_instantiated_tensors(seed in 0u64..1_000_000) {
        let cfg = common::random_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let m = HybridModel::init(cfg.clone(), seed).unwrap();
        prop_assert_eq!(m.num_params(), param_count(&cfg));
    }

    #[test]
    fn trimming_zeroed_components_matches_masking(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let model = HybridModel::init(cfg.clone(), seed).unwrap();
        let plan = common::random_plan(&cfg, &mut rng);
        let masked = common::mask(&model, &plan);
        let trimmed = apply_plan(&masked, &plan).unwrap();
        prop_assert_eq!(trimmed.num_params(), param_count(&plan.result_config(&cfg).unwrap()));
        let ids = common::random_tokens(cfg.vocab, 14, &mut rng);
        let a = masked.forward_with(&ids, 7, Default::default()).unwrap();
        let b = trimmed.forward_with(&ids, 7, Default::default()).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn group_ranking_matches_selection_oracle(seed in 0u64..1_000_000, groups in 1usize..5, per in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::tie_heavy_scores(groups * per, &mut rng);
        for k_g in 1..=per {
            prop_assert_eq!(
                rank_group_constrained(&f, groups, k_g).unwrap(),
                common::brute_rank(&f, groups, k_g)
            );
        }
    }
}

/// Layers kept when `n` layers remain: attention layers stay and Mamba/FFN
/// layers are dropped from the end.
fn depth_keep(cfg: &ModelConfig, n: usize) -> Vec<usize> {
    let mut drop = cfg.n_layers - n;
    let mut keep: Vec<usize> = (0..cfg.n_layers).collect();
    for i in (0..cfg.n_layers).rev() {
        if drop == 0 {
            break;
        }
        if cfg.layer_pattern[i] != LayerKind::Attention {
            keep.retain(|&k| k != i);
            drop -= 1;
        }
    }
    keep
}

/// (layers, emb, ffn, heads, head channels) for every row of the published
/// candidate table, the last one being the larger depth-only model.
const CANDIDATES: [(usize, usize, usize, usize, usize); 25] = [
    (52, 3072, 12288, 112, 64),
    (52, 3072, 10752, 128, 64),
    (52, 3328, 9984, 112, 64),
    (52, 3072, 12288, 112, 60),
    (52, 3072, 12288, 120, 56),
    (52, 3072, 13056, 112, 56),
    (44, 3072, 14592, 128, 64),
    (44, 3584, 10752, 120, 64),
    (52, 3072, 11520, 112, 64),
    (52, 3072, 13056, 96, 64),
    (52, 3072, 13824, 128, 48),
    (52, 3072, 12288, 104, 62),
    (52, 3072, 13056, 104, 60),
    (52, 3072, 13056, 96, 62),
    (52, 3072, 14592, 96, 56),
    (48, 3072, 12288, 128, 64),
    (48, 3328, 9984, 128, 64),
    (52, 3072, 13824, 96, 58),
    (52, 3072, 11520, 128, 56),
    (44, 3328, 11648, 128, 64),
    (48, 3072, 13824, 112, 64),
    (48, 3328, 11648, 112, 64),
    (52, 3072, 16128, 64, 64),
    (26, 4096, 21504, 128, 64),
    (36, 4096, 21504, 128, 64),
];

fn candidate_config(parent: &ModelConfig, row: (usize, usize, usize, usize, usize)) -> ModelConfig {
    let (layers, emb, ffn, heads, ch) = row;
    let targets = PruneTargets {
        n_layers: layers,
        d_model: emb,
        d_ffn: ffn,
        mamba_heads: heads,
        mamba_head_dim: ch,
        attn_heads: parent.attn_heads,
    };
    target_config(parent, &targets, &depth_keep(parent, layers))
}

#[test]
fn eight_billion_parent_budget_filter() {
    let parent = ModelConfig::nemotron_h_8b();
    let p = param_count(&parent) as f64;
    assert!((8.0e9..8.4e9).contains(&p), "parent has {p} parameters");
    let (budget, tol) = (4.5e9, 0.04);
    for (i, row) in CANDIDATES.iter().enumerate() {
        let cfg = candidate_config(&parent, *row);
        let n = param_count(&cfg) as f64;
        let inside = (n - budget).abs() <= tol * budget;
        if i < 24 {
            assert!(inside, "row {} has {n} parameters", i + 1);
        } else {
            assert!(!inside && n > budget, "larger row has {n} parameters");
        }
    }
}

#[test]
fn grid_enumeration_finds_the_two_leading_rows() {
    let parent = ModelConfig::nemotron_h_8b();
    let grid = SearchGrid {
        n_layers: vec![52],
        d_model: vec![3072],
        d_ffn: vec![10752, 12288],
        mamba_heads: vec![112, 128],
        mamba_head_dim: vec![64],
    };
    let order: Vec<usize> = (0..parent.n_layers).rev().collect();
    let c = enumerate_candidates(&parent, &grid, 4_500_000_000, 0.04, &order).unwrap();
    let points: Vec<(usize, usize)> = c.iter().map(|c| (c.d_ffn, c.mamba_heads)).collect();
    assert!(points.contains(&(12288, 112)));
    assert!(points.contains(&(10752, 128)));
}

#[test]
fn plan_for_the_leading_row_resolves_without_weights() {
    let parent = ModelConfig::nemotron_h_8b();
    let per = parent.mamba_heads / parent.mamba_groups;
    let k_g = 112 / parent.mamba_groups;
    let heads: Vec<usize> = (0..parent.mamba_groups)
        .flat_map(|g| g * per..g * per + k_g)
        .collect();
    let mut mamba = BTreeMap::new();
    let mut ffn = BTreeMap::new();
    let mut attention = BTreeMap::new();
    for (i, k) in parent.layer_pattern.iter().enumerate() {
        match k {
            LayerKind::Mamba => {
                mamba.insert(
                    i,
                    MambaKeep {
                        heads: heads.clone(),
                        channels: (0..64).collect(),
                    },
                );
            }
            LayerKind::Ffn => {
                ffn.insert(i, (0..12288).collect());
            }
            LayerKind::Attention => {
                attention.insert(i, (0..parent.attn_heads).collect());
            }
        }
    }
    let plan = PrunePlan {
        targets: PruneTargets {
            n_layers: 52,
            d_model: 3072,
            d_ffn: 12288,
            mamba_heads: 112,
            mamba_head_dim: 64,
            attn_heads: parent.attn_heads,
        },
        kept_layers: (0..52).collect(),
        embedding: (0..3072).collect(),
        mamba,
        ffn,
        attention,
    };
    let cfg = plan.result_config(&parent).unwrap();
    assert_eq!(cfg, candidate_config(&parent, CANDIDATES[0]));
    assert_eq!(param_count(&cfg), param_count(&candidate_config(&parent, CANDIDATES[0])));
}

#[test]
fn mismatched_plan_is_a_plan_error() {
    let cfg = ModelConfig::new("M-*", 8, 16, 4, 4, 2, 4, 2, 32).unwrap();
    let other = ModelConfig::new("M-*M-", 8, 16, 4, 4, 2, 4, 2, 32).unwrap();
    let model = HybridModel::init(cfg, 1).unwrap();
    let err = apply_plan(&model, &PrunePlan::identity(&other)).unwrap_err();
    assert!(matches!(err, hybridprune::Error::Plan(_)), "{err}");
}
