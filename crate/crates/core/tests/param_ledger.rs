//! Scalar-parameter ledger of the micro network (D = 4, one block per
//! stage), tallied layer by layer by hand.

use marmamba::backbone::{count_params, Marmamba, NetConfig};
use marmamba::msmamba::BranchSet;

/// One MS-Mamba block at width C (d_state 8, inner 2C, dt rank ⌈C/16⌉,
/// conv width 3, FFN ×2, 3×3 pooled attention over two pools).
///
/// | C  | norms | FMB expand | 3 × branch | FMB proj | AMFN | total  |
/// |----|-------|------------|------------|----------|------|--------|
/// | 4  | 16    | 60         | 3 × 372    | 20       | 95   | 1 307  |
/// | 8  | 32    | 216        | 3 × 936    | 72       | 299  | 3 427  |
/// | 16 | 64    | 816        | 3 × 2 640  | 272      | 1091 | 10 163 |
/// | 32 | 128   | 3 168      | 3 × 8 480  | 1 056    | 4211 | 34 003 |
const BLOCK: [(usize, usize); 4] = [(4, 1307), (8, 3427), (16, 10163), (32, 34003)];

const STAGE_WIDTHS: [usize; 8] = [4, 8, 16, 32, 16, 8, 4, 4];

/// stem 3×3 1→4 (40); strided 3×3 downs 4→8, 8→16, 16→32 (296 + 1168 +
/// 4640); 2×2 transposed ups 32→16, 16→8, 8→4 (2064 + 520 + 132); 1×1
/// fuses 32→16, 16→8, 8→4 (528 + 136 + 36); head 3×3 4→1 (37).
const GLUE: usize = 40 + 296 + 1168 + 4640 + 2064 + 520 + 132 + 528 + 136 + 36 + 37;

const MICRO_TOTAL: usize = 74_701;

#[test]
fn ledger_adds_up() {
    let blocks: usize = STAGE_WIDTHS
        .iter()
        .map(|w| BLOCK.iter().find(|(c, _)| c == w).expect("width in ledger").1)
        .sum();
    assert_eq!(blocks + GLUE, MICRO_TOTAL);
}

#[test]
fn micro_network_matches_ledger() {
    let (_, ps) = Marmamba::new(NetConfig::micro(), 0).unwrap();
    assert_eq!(count_params(&ps), MICRO_TOTAL);
}

#[test]
fn count_is_seed_independent() {
    let (_, a) = Marmamba::new(NetConfig::micro(), 1).unwrap();
    let (_, b) = Marmamba::new(NetConfig::micro(), 99).unwrap();
    assert_eq!(count_params(&a), count_params(&b));
}

#[test]
fn dropping_fmb_branches_removes_exactly_their_parameters() {
    let mut cfg = NetConfig::micro();
    cfg.block.fmb_branches = BranchSet::NORMAL_ONLY;
    let (_, ps) = Marmamba::new(cfg, 0).unwrap();
    // two of three branches per block: 2/3 of the branch column
    let branch: usize = STAGE_WIDTHS
        .iter()
        .map(|&w| match w {
            4 => 372,
            8 => 936,
            16 => 2640,
            _ => 8480,
        })
        .sum();
    assert_eq!(count_params(&ps), MICRO_TOTAL - 2 * branch);
}
