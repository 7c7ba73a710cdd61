// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte comparison of rendered heatmaps against checked-in golden files.
//! Regenerate with `TUNELENS_BLESS=1 cargo test -p tunelens --test render_golden`.

use std::path::PathBuf;

use tunelens::attribution::{ImportanceMethod, SalientMap};
use tunelens::report::{heatmap_ppm, heatmap_svg};
use tunelens::Matrix;

fn fixture_map() -> SalientMap {
    // 3 prompt tokens x 4 response tokens, L = 10, b = 0
    let levels = [10.0, 0.0, 3.0, 7.0, 5.0, 10.0, 0.0, 10.0, 1.0, 2.0, 10.0, 0.0];
    let s = Matrix::new(3, 4, levels.to_vec()).unwrap();
    SalientMap {
        prompt_ids: vec![40, 41, 42],
        response_ids: vec![43, 44, 45, 46],
        prompt_tokens: vec!["▁write".into(), "▁a".into(), "▁poem".into()],
        response_tokens: vec!["▁Roses".into(), "▁are".into(), "▁red".into(), "<&>".into()],
        importance: s.clone(),
        normalized: s,
        level_count: 10,
        threshold_b: 0,
        method: ImportanceMethod::Occlusion,
    }
}

fn check(name: &str, bytes: &[u8]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    if std::env::var_os("TUNELENS_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let golden = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(golden == bytes, "{name} differs from golden file");
}

#[test]
fn svg_matches_golden() {
    check("heatmap.svg", heatmap_svg(&fixture_map(), 16).as_bytes());
}

#[test]
fn ppm_matches_golden() {
    check("heatmap.ppm", &heatmap_ppm(&fixture_map(), 4));
}
