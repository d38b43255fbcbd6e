//! Procedural generator of scale-ambiguous labeled scenes.
//!
//! Water comes in two classes that share one texture: a blob is small
//! water ("pond") iff its bounding box fits inside a `patch_hint` square,
//! otherwise it is large water ("river"). A window that fits entirely
//! inside a large water body therefore sees pixel statistics identical to a
//! pond, so the class is undecidable from local evidence alone and a wider
//! context is required. Built areas use a distinct texture that is
//! identifiable locally.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeedStream};
use crate::tiling::{LabelMask, Raster};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_POND: u8 = 1;
pub const CLASS_RIVER: u8 = 2;
pub const CLASS_BUILT: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Per-class base colors, cycled when the raster has more channels.
const BASE_BACKGROUND: [f64; 3] = [0.34, 0.52, 0.30];
const BASE_WATER: [f64; 3] = [0.16, 0.28, 0.58]; // shared by pond and river
/// Built areas are a two-tone checkerboard around the background color:
/// unmistakable at native resolution, but box-downsampling averages it back
/// to the background tone, so coarse context carries no reliable evidence
/// for them.
const BUILT_CONTRAST: f64 = 0.18;

const PLACEMENT_RETRIES: usize = 100;
/// Minimum gap between blob bounding boxes, keeping per-blob labels exact.
const BLOB_GAP: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// The sliding-window size the ambiguity is calibrated against: water
    /// blobs with a bounding box within `patch_hint x patch_hint` are
    /// ponds, larger ones rivers.
    pub patch_hint: usize,
    pub channels: usize,
    /// Inclusive blob-count ranges per class.
    pub ponds: (usize, usize),
    pub rivers: (usize, usize),
    pub built: (usize, usize),
    /// Uniform texture noise amplitude; must stay below the contrast
    /// between texture families.
    pub noise_amp: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 * self.patch_hint || self.width < 4 * self.patch_hint {
            return Err(Error::Config(format!(
                "scene {}x{} smaller than 4x patch_hint {}",
                self.height, self.width, self.patch_hint
            )));
        }
        let contrast = BASE_BACKGROUND
            .iter()
            .zip(&BASE_WATER)
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min);
        if self.noise_amp >= contrast {
            return Err(Error::Config(format!(
                "noise amplitude {} not below texture contrast {contrast}",
                self.noise_amp
            )));
        }
        if self.ponds.0 > self.ponds.1 || self.rivers.0 > self.rivers.1 || self.built.0 > self.built.1 {
            return Err(Error::Config("blob count range minimum exceeds maximum".into()));
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 512,
            width: 512,
            patch_hint: 64,
            channels: 3,
            ponds: (14, 18),
            rivers: (1, 1),
            built: (2, 4),
            noise_amp: 0.06,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BlobShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    row: usize,
    col: usize,
    h: usize,
    w: usize,
    shape: BlobShape,
    class: u8,
}

impl Blob {
    fn contains(&self, r: usize, c: usize) -> bool {
        if r < self.row || r >= self.row + self.h || c < self.col || c >= self.col + self.w {
            return false;
        }
        match self.shape {
            BlobShape::Rect => true,
            BlobShape::Ellipse => {
                // pixel-center test against the inscribed ellipse
                let cy = self.row as f64 + self.h as f64 / 2.0;
                let cx = self.col as f64 + self.w as f64 / 2.0;
                let ry = self.h as f64 / 2.0;
                let rx = self.w as f64 / 2.0;
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn gap_overlaps(&self, other: &Blob) -> bool {
        let r0 = self.row.saturating_sub(BLOB_GAP);
        let c0 = self.col.saturating_sub(BLOB_GAP);
        let r1 = self.row + self.h + BLOB_GAP;
        let c1 = self.col + self.w + BLOB_GAP;
        r0 < other.row + other.h && other.row < r1 && c0 < other.col + other.w && other.col < c1
    }
}

/// Deterministically generate one labeled scene from its config.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(Raster, LabelMask)> {
    cfg.validate()?;
    let mut stream = SeedStream::new(cfg.seed, "scene");
    let rng = stream.rng();
    let hint = cfg.patch_hint;

    let n_rivers = rng.gen_range(cfg.rivers.0..=cfg.rivers.1);
    let n_ponds = rng.gen_range(cfg.ponds.0..=cfg.ponds.1);
    let n_built = rng.gen_range(cfg.built.0..=cfg.built.1);

    let mut blobs: Vec<Blob> = Vec::new();
    // largest first: rivers, then built, then ponds. Pond and river sizes
    // are kept in disjoint regimes (ponds well under the patch hint, rivers
    // several times it) so that water extent stays decidable from a
    // downsampled context window at every legal scale.
    for i in 0..n_rivers {
        let long = rng.gen_range(3 * hint..=4 * hint);
        let short = rng.gen_range(5 * hint / 2..=3 * hint);
        let (h, w) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
        place_blob(rng, cfg, &mut blobs, h, w, CLASS_RIVER, &format!("river {i}"))?;
    }
    for i in 0..n_built {
        // alternate compact blocks with thin wall-like strips; the strips
        // survive local inspection but wash out of downsampled context
        if i % 2 == 0 {
            let h = rng.gen_range(hint / 2..=3 * hint / 2);
            let w = rng.gen_range(hint / 2..=3 * hint / 2);
            place_blob(rng, cfg, &mut blobs, h, w, CLASS_BUILT, &format!("built {i}"))?;
        } else {
            let thin = rng.gen_range(hint / 16..=hint / 8).max(2);
            let long = rng.gen_range(hint..=3 * hint);
            let (h, w) = if rng.gen_bool(0.5) { (thin, long) } else { (long, thin) };
            place_thin_rect(rng, cfg, &mut blobs, h, w, &format!("built strip {i}"))?;
        }
    }
    for i in 0..n_ponds {
        // bounding box must fit within the patch hint
        let h = rng.gen_range(hint / 2..=3 * hint / 4);
        let w = rng.gen_range(hint / 2..=3 * hint / 4);
        place_blob(rng, cfg, &mut blobs, h, w, CLASS_POND, &format!("pond {i}"))?;
    }

    let mut labels = LabelMask::zeros(cfg.height, cfg.width, NUM_CLASSES);
    for blob in &blobs {
        // the water class follows the size rule, not the draw; built keeps its class
        let class = match blob.class {
            CLASS_POND | CLASS_RIVER => {
                if blob.h <= hint && blob.w <= hint {
                    CLASS_POND
                } else {
                    CLASS_RIVER
                }
            }
            c => c,
        };
        debug_assert_eq!(class, blob.class, "size draw must agree with the class rule");
        for r in blob.row..blob.row + blob.h {
            for c in blob.col..blob.col + blob.w {
                if blob.contains(r, c) {
                    labels.set(r, c, class);
                }
            }
        }
    }

    let mut raster = Raster::zeros(cfg.channels, cfg.height, cfg.width);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (base, offset) = match labels.get(r, c) {
                CLASS_POND | CLASS_RIVER => (&BASE_WATER, 0.0),
                CLASS_BUILT => {
                    let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                    (&BASE_BACKGROUND, sign * BUILT_CONTRAST)
                }
                _ => (&BASE_BACKGROUND, 0.0),
            };
            for ch in 0..cfg.channels {
                let noise = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.noise_amp;
                raster.set(ch, r, c, (base[ch % 3] + offset + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok((raster, labels))
}

fn place_thin_rect(
    rng: &mut rand_chacha::ChaCha8Rng,
    cfg: &SceneConfig,
    blobs: &mut Vec<Blob>,
    h: usize,
    w: usize,
    what: &str,
) -> Result<()> {
    if h >= cfg.height || w >= cfg.width {
        return Err(Error::Generation(format!("{what} of {h}x{w} exceeds the scene")));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let row = rng.gen_range(0..=cfg.height - h);
        let col = rng.gen_range(0..=cfg.width - w);
        let blob = Blob { row, col, h, w, shape: BlobShape::Rect, class: CLASS_BUILT };
        if blobs.iter().all(|b| !blob.gap_overlaps(b)) {
            blobs.push(blob);
            return Ok(());
        }
    }
    Err(Error::Generation(format!(
        "could not place {what} of {h}x{w} after {PLACEMENT_RETRIES} attempts"
    )))
}

fn place_blob(
    rng: &mut rand_chacha::ChaCha8Rng,
    cfg: &SceneConfig,
    blobs: &mut Vec<Blob>,
    h: usize,
    w: usize,
    class: u8,
    what: &str,
) -> Result<()> {
    if h >= cfg.height || w >= cfg.width {
        return Err(Error::Generation(format!("{what} of {h}x{w} exceeds the scene")));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let row = rng.gen_range(0..=cfg.height - h);
        let col = rng.gen_range(0..=cfg.width - w);
        let shape = if rng.gen_bool(0.5) { BlobShape::Rect } else { BlobShape::Ellipse };
        let blob = Blob { row, col, h, w, shape, class };
        if blobs.iter().all(|b| !blob.gap_overlaps(b)) {
            blobs.push(blob);
            return Ok(());
        }
    }
    Err(Error::Generation(format!(
        "could not place {what} of {h}x{w} after {PLACEMENT_RETRIES} attempts"
    )))
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneEntry {
    pub id: usize,
    pub raster_path: PathBuf,
    pub label_path: PathBuf,
    pub seed: u64,
}

const MANIFEST_HEADER: &str = "id\traster\tlabel\tseed";

/// Generate `n_scenes` scenes under `out_dir`, writing tensor files plus a
/// tab-separated manifest. Scene seeds derive from `cfg.seed` and the scene
/// index, so the same config always produces identical files.
pub fn generate_dataset(cfg: &SceneConfig, n_scenes: usize, out_dir: &Path) -> Result<Vec<SceneEntry>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    use rayon::prelude::*;
    let entries: Vec<(SceneEntry, Raster, LabelMask)> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, "scene", i as u64);
            let scene_cfg = SceneConfig { seed, ..cfg.clone() };
            let (raster, labels) = generate_scene(&scene_cfg)?;
            let entry = SceneEntry {
                id: i,
                raster_path: PathBuf::from(format!("scene_{i:04}.raster.gatn")),
                label_path: PathBuf::from(format!("scene_{i:04}.labels.gatn")),
                seed,
            };
            Ok((entry, raster, labels))
        })
        .collect::<Result<_>>()?;

    let manifest_path = out_dir.join("manifest.tsv");
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (entry, raster, labels) in &entries {
        crate::io::write_raster(&out_dir.join(&entry.raster_path), raster)?;
        crate::io::write_labels(&out_dir.join(&entry.label_path), labels)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            entry.id,
            entry.raster_path.display(),
            entry.label_path.display(),
            entry.seed
        ));
    }
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
    // returned entries carry resolved paths; the manifest keeps relative ones
    Ok(entries
        .into_iter()
        .map(|(e, _, _)| SceneEntry {
            raster_path: out_dir.join(&e.raster_path),
            label_path: out_dir.join(&e.label_path),
            ..e
        })
        .collect())
}

/// Parse a manifest; relative paths resolve against the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SceneEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::Config(format!("{}: missing manifest header", path.display()))),
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "{}:{}: expected 4 tab-separated fields",
                path.display(),
                lineno + 2
            )));
        }
        let parse_err = |what: &str| Error::Config(format!("{}:{}: bad {what}", path.display(), lineno + 2));
        entries.push(SceneEntry {
            id: fields[0].parse().map_err(|_| parse_err("id"))?,
            raster_path: dir.join(fields[1]),
            label_path: dir.join(fields[2]),
            seed: fields[3].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(entries)
}
