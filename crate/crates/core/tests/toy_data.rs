//! Statistics and determinism of the synthetic glyph grids.

use acm_core::toy::{export_dataset, gen_dataset, import_dataset, DatasetConfig};

fn cfg(seed: u64, n: usize) -> DatasetConfig {
    DatasetConfig { seed, n, classes: 4, glyph_size: 7, noise_std: 0.1 }
}

#[test]
fn labels_and_indices_are_uniform_within_three_sigma() {
    let n = 4000;
    let data = gen_dataset(&cfg(21, n)).unwrap();
    let (mut labels, mut indices, mut cells) = ([0usize; 4], [0usize; 4], [0usize; 4]);
    for s in &data {
        labels[s.label] += 1;
        indices[s.index] += 1;
        for &c in &s.cells {
            cells[c] += 1;
        }
        assert_eq!(s.label, s.cells[s.index]);
    }
    let check = |counts: [usize; 4], total: usize| {
        let mean = total as f64 / 4.0;
        let sigma = (total as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    };
    check(labels, n);
    check(indices, n);
    check(cells, 4 * n);
}

#[test]
fn seeds_determine_bytes() {
    let a = gen_dataset(&cfg(3, 50)).unwrap();
    let b = gen_dataset(&cfg(3, 50)).unwrap();
    let c = gen_dataset(&cfg(4, 50)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn export_then_import() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_dataset(&cfg(5, 12)).unwrap();
    export_dataset(dir.path(), &a).unwrap();
    assert_eq!(import_dataset(dir.path()).unwrap(), a);
}
