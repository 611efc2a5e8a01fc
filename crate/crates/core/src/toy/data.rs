//! Synthetic 2×2 glyph grids.
//!
//! Each image places four independently drawn glyphs in a 2×2 grid; a query
//! index 0..=3 (row-major: 0, 1 top; 2, 3 bottom) selects the cell whose class
//! is the label.

use std::fs;
use std::path::Path;

use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::tsr;

/// Built-in 5×5 binary glyphs, one string per row, `#` = 1.
pub const GLYPHS: [[&str; 5]; 8] = [
    // 0: ring
    [".###.", "#...#", "#...#", "#...#", ".###."],
    // 1: vertical bar
    ["..#..", ".##..", "..#..", "..#..", ".###."],
    // 2: cross
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    // 3: diagonal X
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    // 4: filled square
    ["#####", "#####", "##.##", "#####", "#####"],
    // 5: horizontal stripes
    ["#####", ".....", "#####", ".....", "#####"],
    // 6: L shape
    ["#....", "#....", "#....", "#....", "#####"],
    // 7: triangle
    ["..#..", ".###.", "#####", ".....", "#####"],
];

pub const MAX_CLASSES: usize = GLYPHS.len();
pub const MIN_GLYPH_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    /// `1×G×G`, values in `[0, 1]`, `G = 2·glyph_size`
    pub image: Tensor,
    pub index: usize,
    pub label: usize,
    /// class of every cell in row-major order; `label == cells[index]`
    pub cells: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub glyph_size: usize,
    pub noise_std: f32,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.classes > MAX_CLASSES {
            return Err(Error::TooManyClasses { requested: self.classes, max: MAX_CLASSES });
        }
        if self.classes == 0 {
            return Err(Error::InvalidArgument("at least one class is required".into()));
        }
        if self.glyph_size < MIN_GLYPH_SIZE {
            return Err(Error::InvalidArgument(format!("glyph size must be at least {MIN_GLYPH_SIZE}")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Glyph `class` rendered at `size×size` by nearest-neighbour scaling.
pub fn render_glyph(class: usize, size: usize) -> Vec<f32> {
    let rows = &GLYPHS[class];
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let row = rows[r * 5 / size].as_bytes();
        for c in 0..size {
            out.push(if row[c * 5 / size] == b'#' { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Noise-free grid image for the given cell classes.
pub fn render_grid(cells: [usize; 4], glyph_size: usize) -> Vec<f32> {
    let g = glyph_size;
    let side = 2 * g;
    let mut img = vec![0f32; side * side];
    for (q, &class) in cells.iter().enumerate() {
        let glyph = render_glyph(class, g);
        let (r0, c0) = ((q / 2) * g, (q % 2) * g);
        for r in 0..g {
            img[(r0 + r) * side + c0..(r0 + r) * side + c0 + g].copy_from_slice(&glyph[r * g..(r + 1) * g]);
        }
    }
    img
}

fn gen_sample(cfg: &DatasetConfig, i: usize) -> GridSample {
    let mut r = rng::stream(cfg.seed, tag::DATA, i as u64);
    let cells = [0; 4].map(|_| r.random_range(0..cfg.classes));
    let index = r.random_range(0..4usize);
    let mut img = render_grid(cells, cfg.glyph_size);
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_std).expect("validated std");
        for v in &mut img {
            *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    let side = 2 * cfg.glyph_size;
    GridSample { image: Tensor::from_parts(vec![1, side, side], img), index, label: cells[index], cells }
}

/// Best accuracy any predictor can reach from the image alone, without the
/// query index: guess a most frequent class in the grid, which is right
/// with probability `max count / 4`. Exact enumeration over `K^4` grids.
pub fn index_free_accuracy_bound(classes: usize) -> Result<f64> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::TooManyClasses { requested: classes, max: MAX_CLASSES });
    }
    let total = classes.pow(4);
    let mut hits = 0usize;
    for code in 0..total {
        let mut counts = [0usize; MAX_CLASSES];
        let mut c = code;
        for _ in 0..4 {
            counts[c % classes] += 1;
            c /= classes;
        }
        hits += counts.iter().max().copied().unwrap_or(0);
    }
    Ok(hits as f64 / (4 * total) as f64)
}

pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Vec<GridSample>> {
    gen_dataset_with(cfg, Exec::Sequential)
}

/// Sample `i` draws only from its own stream, so parallel generation
/// reproduces the sequential dataset exactly.
pub fn gen_dataset_with(cfg: &DatasetConfig, exec: Exec) -> Result<Vec<GridSample>> {
    cfg.validate()?;
    Ok(map_indexed(exec, cfg.n, |i| gen_sample(cfg, i)))
}

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "id,index,label,cell0,cell1,cell2,cell3";

/// Writes `<id>.tsr` per image and a `manifest.csv`.
pub fn export_dataset(dir: impl AsRef<Path>, samples: &[GridSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (id, s) in samples.iter().enumerate() {
        tsr::write(&s.image, dir.join(format!("{id:06}.tsr")))?;
        let [a, b, c, d] = s.cells;
        manifest.push_str(&format!("{id},{},{},{a},{b},{c},{d}\n", s.index, s.label));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Vec<GridSample>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format("unexpected manifest header".into()));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<usize> = line
            .split(',')
            .map(|f| f.trim().parse::<usize>().map_err(|e| Error::Format(format!("manifest field {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [id, index, label, a, b, c, d] = fields[..] else {
            return Err(Error::Format(format!("manifest row {line:?} needs 7 fields")));
        };
        if index > 3 || [a, b, c, d][index] != label {
            return Err(Error::Format(format!("inconsistent manifest row {line:?}")));
        }
        let image = tsr::read(dir.join(format!("{id:06}.tsr")))?;
        out.push(GridSample { image, index, label, cells: [a, b, c, d] });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn index_free_bound_values() {
        assert_eq!(super::index_free_accuracy_bound(1).unwrap(), 1.0);
        assert!((super::index_free_accuracy_bound(2).unwrap() - 0.6875).abs() < 1e-12);
        assert!((super::index_free_accuracy_bound(4).unwrap() - 0.53125).abs() < 1e-12);
        assert!(super::index_free_accuracy_bound(0).is_err());
        assert!(super::index_free_accuracy_bound(9).is_err());
    }

    use super::*;

    fn cfg(seed: u64, n: usize, noise: f32) -> DatasetConfig {
        DatasetConfig { seed, n, classes: 4, glyph_size: 7, noise_std: noise }
    }

    #[test]
    fn deterministic_and_parallel_identical() {
        let a = gen_dataset(&cfg(3, 50, 0.2)).unwrap();
        let b = gen_dataset(&cfg(3, 50, 0.2)).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset_with(&cfg(3, 50, 0.2), Exec::Parallel).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, gen_dataset(&cfg(4, 50, 0.2)).unwrap());
    }

    #[test]
    fn clean_images_are_glyph_renders() {
        for s in gen_dataset(&cfg(5, 20, 0.0)).unwrap() {
            assert_eq!(s.image.data(), render_grid(s.cells, 7).as_slice());
            assert_eq!(s.label, s.cells[s.index]);
        }
    }

    #[test]
    fn noisy_values_in_unit_range() {
        for s in gen_dataset(&cfg(6, 20, 0.5)).unwrap() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.index < 4 && s.label < 4);
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        for size in [5, 7, 9] {
            for a in 0..MAX_CLASSES {
                for b in a + 1..MAX_CLASSES {
                    assert_ne!(render_glyph(a, size), render_glyph(b, size), "{a} {b} at {size}");
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(1, 1, 0.0);
        c.classes = 9;
        assert!(matches!(gen_dataset(&c), Err(Error::TooManyClasses { .. })));
        let mut c = cfg(1, 1, 0.0);
        c.glyph_size = 4;
        assert!(gen_dataset(&c).is_err());
        assert!(gen_dataset(&cfg(1, 1, -0.1)).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&cfg(8, 12, 0.1)).unwrap();
        export_dataset(dir.path(), &data).unwrap();
        assert_eq!(import_dataset(dir.path()).unwrap(), data);
    }
}
