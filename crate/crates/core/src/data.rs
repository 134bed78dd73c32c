//! Deterministic synthetic person-search benchmark. Each identity is a
//! striped color glyph; scenes place glyphs at random scales and positions
//! over a noisy background, annotated with exact boxes and identity labels.
//! The generator emits a train split, query scenes, and gallery scenes in
//! which each query has exactly one true match.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::boxes::{box_iou, BoxCxcywh};
use crate::error::{Error, Result};
use crate::loss::SceneTargets;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stripe count range of a glyph, inclusive.
pub const STRIPES: (usize, usize) = (3, 5);
/// Placement attempts per person before the scene is declared infeasible.
const PLACEMENT_BUDGET: usize = 64;
/// Background noise range; glyph stripe colors may fall anywhere in
/// [0.05, 0.95], the annotation never relies on contrast.
const BACKGROUND: (f64, f64) = (0.25, 0.45);

/// One identity's appearance: a fixed stack of horizontal color stripes,
/// rendered scale-covariantly.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphPattern {
    pub stripes: Vec<[f64; 3]>,
}

impl GlyphPattern {
    fn draw(rng: &mut Rng) -> GlyphPattern {
        let n = STRIPES.0 + rng.below(STRIPES.1 - STRIPES.0 + 1);
        let stripes = (0..n)
            .map(|_| [rng.range(0.05, 0.95), rng.range(0.05, 0.95), rng.range(0.05, 0.95)])
            .collect();
        GlyphPattern { stripes }
    }

    /// Quantized fingerprint for collision checks between identities.
    fn signature(&self) -> Vec<u32> {
        let mut sig = vec![self.stripes.len() as u32];
        for s in &self.stripes {
            for c in s {
                sig.push((c * 1000.0).round() as u32);
            }
        }
        sig
    }
}

/// Who occupies a scene slot: a labeled identity or one of the unlabeled
/// distractor appearances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonKind {
    Labeled(usize),
    Distractor(usize),
}

impl PersonKind {
    pub fn label(&self) -> Option<usize> {
        match self {
            PersonKind::Labeled(i) => Some(*i),
            PersonKind::Distractor(_) => None,
        }
    }
}

/// All glyphs of a dataset: one per labeled identity, plus distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphBook {
    labeled: Vec<GlyphPattern>,
    distractors: Vec<GlyphPattern>,
}

impl GlyphBook {
    /// Derives every pattern from the root rng, redrawing on fingerprint
    /// collisions so distinct identities always look distinct.
    pub fn build(labeled: usize, distractors: usize, root: &Rng) -> Result<GlyphBook> {
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let mut draw_unique = |salt: u64| -> Result<GlyphPattern> {
            let mut rng = root.fork_named("glyph").fork(salt);
            for _ in 0..32 {
                let p = GlyphPattern::draw(&mut rng);
                let sig = p.signature();
                if !seen.contains(&sig) {
                    seen.push(sig);
                    return Ok(p);
                }
            }
            Err(Error::Generation {
                scene_seed: salt,
                msg: "could not draw a collision-free glyph".into(),
            })
        };
        let labeled = (0..labeled).map(|k| draw_unique(k as u64)).collect::<Result<_>>()?;
        let distractors = (0..distractors)
            .map(|k| draw_unique(1_000_000 + k as u64))
            .collect::<Result<_>>()?;
        Ok(GlyphBook { labeled, distractors })
    }

    pub fn pattern(&self, kind: PersonKind) -> &GlyphPattern {
        match kind {
            PersonKind::Labeled(i) => &self.labeled[i],
            PersonKind::Distractor(i) => &self.distractors[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePerson {
    pub bbox: BoxCxcywh,
    /// None marks a visible but unlabeled person.
    pub id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Channel-major RGB, `3 * size * size` values in [0,1]. Stored at f32
    /// precision so files round-trip bit-exactly.
    pub image: Vec<f32>,
    pub size: usize,
    pub persons: Vec<ScenePerson>,
    pub camera_id: usize,
}

impl Scene {
    /// Untracked [3, size, size] input tensor for the model.
    pub fn image_tensor(&self) -> Result<Tensor> {
        let vals: Vec<f64> = self.image.iter().map(|&v| v as f64).collect();
        Tensor::new(&[3, self.size, self.size], vals)
    }

    pub fn targets(&self) -> SceneTargets {
        SceneTargets {
            boxes: self.persons.iter().map(|p| p.bbox).collect(),
            ids: self.persons.iter().map(|p| p.id).collect(),
        }
    }
}

/// One retrieval problem: the box of a labeled person in a query scene and
/// the single gallery scene that truly contains the same identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub scene: usize,
    pub identity: usize,
    pub bbox: BoxCxcywh,
    pub true_gallery: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Glyph pixel size (width, height) at scale 1.
    pub base_glyph: (usize, usize),
    pub scale_range: (f64, f64),
    pub persons_per_scene: (usize, usize),
    pub labeled: usize,
    pub unlabeled: usize,
    pub train_scenes: usize,
    pub gallery_scenes: usize,
    pub cameras: usize,
    /// Maximum IoU tolerated between two placed boxes.
    pub max_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            image_size: 96,
            base_glyph: (12, 24),
            scale_range: (0.5, 2.0),
            persons_per_scene: (1, 4),
            labeled: 16,
            unlabeled: 8,
            train_scenes: 300,
            gallery_scenes: 50,
            cameras: 4,
            max_overlap: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.labeled == 0 {
            return err("need at least one labeled identity".into());
        }
        if self.image_size < 8 {
            return err(format!("image size {} too small", self.image_size));
        }
        let (bw, bh) = self.base_glyph;
        if bw < 2 || bh < 2 {
            return err(format!("base glyph {bw}x{bh} too small"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return err(format!("invalid scale range {lo}..{hi}"));
        }
        let max_side = (bw.max(bh) as f64 * hi).ceil() as usize;
        if max_side > self.image_size {
            return err(format!(
                "glyph at max scale ({max_side} px) exceeds image size {}",
                self.image_size
            ));
        }
        let (plo, phi) = self.persons_per_scene;
        if plo < 1 || phi < plo {
            return err(format!("invalid persons-per-scene range {plo}..{phi}"));
        }
        if self.cameras < 2 {
            return err("need at least two cameras".into());
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return err(format!("max overlap {} not in [0,1)", self.max_overlap));
        }
        if self.train_scenes < 2 || 2 * self.labeled > self.train_scenes * phi {
            return err(format!(
                "{} identities need 2 placements each but {} train scenes hold at most {}",
                self.labeled,
                self.train_scenes,
                self.train_scenes * phi
            ));
        }
        if self.gallery_scenes < self.labeled {
            return err(format!(
                "gallery needs one true-match scene per identity: {} < {}",
                self.gallery_scenes, self.labeled
            ));
        }
        if self.unlabeled == 0 && self.gallery_scenes > self.labeled {
            return err("distractor-only gallery filler scenes need unlabeled identities".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<Scene>,
    pub query_scenes: Vec<Scene>,
    pub gallery: Vec<Scene>,
    pub queries: Vec<Query>,
}

/// Glyph pixel size at a given scale, clamped to stay renderable.
pub fn glyph_size(base: (usize, usize), scale: f64, max: usize) -> (usize, usize) {
    let side = |b: usize| (((b as f64) * scale).round() as usize).clamp(2, max);
    (side(base.0), side(base.1))
}

/// Normalized center-size box of an integer pixel rectangle.
pub fn pixel_box(x0: usize, y0: usize, pw: usize, ph: usize, size: usize) -> BoxCxcywh {
    let s = size as f64;
    BoxCxcywh::new(
        (x0 as f64 + pw as f64 / 2.0) / s,
        (y0 as f64 + ph as f64 / 2.0) / s,
        pw as f64 / s,
        ph as f64 / s,
    )
}

fn paint_glyph(img: &mut [f64], size: usize, pat: &GlyphPattern, x0: usize, y0: usize, pw: usize, ph: usize) {
    let n = pat.stripes.len();
    for ly in 0..ph {
        let color = &pat.stripes[ly * n / ph];
        for lx in 0..pw {
            for (ch, &c) in color.iter().enumerate() {
                img[ch * size * size + (y0 + ly) * size + (x0 + lx)] = c;
            }
        }
    }
}

/// Renders one scene: noise background, then each occupant's glyph at a
/// random scale and a position overlapping the already-placed ones by at
/// most the configured IoU. `scene_seed` names the scene in errors.
pub fn render_scene(
    rng: &mut Rng,
    scene_seed: u64,
    occupants: &[PersonKind],
    camera_id: usize,
    book: &GlyphBook,
    cfg: &DataConfig,
) -> Result<Scene> {
    let s = cfg.image_size;
    let mut img = vec![0.0f64; 3 * s * s];
    for v in img.iter_mut() {
        *v = rng.range(BACKGROUND.0, BACKGROUND.1);
    }
    let mut persons: Vec<ScenePerson> = Vec::with_capacity(occupants.len());
    for &kind in occupants {
        let mut placed = false;
        for _ in 0..PLACEMENT_BUDGET {
            let scale = rng.range(cfg.scale_range.0, cfg.scale_range.1);
            let (pw, ph) = glyph_size(cfg.base_glyph, scale, s);
            let x0 = rng.below(s - pw + 1);
            let y0 = rng.below(s - ph + 1);
            let bbox = pixel_box(x0, y0, pw, ph, s);
            if persons.iter().all(|p| box_iou(&p.bbox, &bbox) <= cfg.max_overlap) {
                paint_glyph(&mut img, s, book.pattern(kind), x0, y0, pw, ph);
                persons.push(ScenePerson { bbox, id: kind.label() });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation {
                scene_seed,
                msg: format!(
                    "no placement for person {} of {} within {PLACEMENT_BUDGET} attempts",
                    persons.len() + 1,
                    occupants.len()
                ),
            });
        }
    }
    Ok(Scene {
        image: img.into_iter().map(|v| v as f32).collect(),
        size: s,
        persons,
        camera_id,
    })
}

/// Decides who appears in each train scene: every labeled identity twice,
/// in scenes with different cameras, then random fill.
fn plan_train_occupants(cfg: &DataConfig, rng: &mut Rng) -> Result<Vec<Vec<PersonKind>>> {
    let n = cfg.train_scenes;
    let camera = |idx: usize| idx % cfg.cameras;
    let counts: Vec<usize> = (0..n)
        .map(|_| cfg.persons_per_scene.0 + rng.below(cfg.persons_per_scene.1 - cfg.persons_per_scene.0 + 1))
        .collect();
    let mut occupants: Vec<Vec<PersonKind>> = vec![Vec::new(); n];

    for i in 0..cfg.labeled {
        let mut first: Option<usize> = None;
        let mut budget = 1000;
        loop {
            if budget == 0 {
                return Err(Error::Generation {
                    scene_seed: i as u64,
                    msg: format!("could not schedule identity {i} into two cross-camera scenes"),
                });
            }
            budget -= 1;
            let s = rng.below(n);
            let has_room = occupants[s].len() < counts[s];
            let fresh = !occupants[s].contains(&PersonKind::Labeled(i));
            match first {
                None => {
                    if has_room && fresh {
                        occupants[s].push(PersonKind::Labeled(i));
                        first = Some(s);
                    }
                }
                Some(f) => {
                    if has_room && fresh && camera(s) != camera(f) {
                        occupants[s].push(PersonKind::Labeled(i));
                        break;
                    }
                }
            }
        }
    }

    for (s, slot) in occupants.iter_mut().enumerate() {
        let mut tries = 0;
        while slot.len() < counts[s] && tries < 64 {
            tries += 1;
            let kind = if cfg.unlabeled > 0 && rng.uniform() < 0.4 {
                PersonKind::Distractor(rng.below(cfg.unlabeled))
            } else {
                PersonKind::Labeled(rng.below(cfg.labeled))
            };
            if !slot.contains(&kind) {
                slot.push(kind);
            }
        }
        if slot.is_empty() {
            slot.push(PersonKind::Labeled(rng.below(cfg.labeled)));
        }
    }
    Ok(occupants)
}

/// Builds the full dataset deterministically from the config seed.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).fork_named("dataset");
    let book = GlyphBook::build(cfg.labeled, cfg.unlabeled, &root)?;

    let mut plan_rng = root.fork_named("train-plan");
    let plan = plan_train_occupants(cfg, &mut plan_rng)?;
    let mut train = Vec::with_capacity(cfg.train_scenes);
    for (idx, occupants) in plan.iter().enumerate() {
        let mut rng = root.fork_named("train-scene").fork(idx as u64);
        train.push(render_scene(&mut rng, idx as u64, occupants, idx % cfg.cameras, &book, cfg)?);
    }

    let mut query_scenes = Vec::with_capacity(cfg.labeled);
    let mut queries = Vec::with_capacity(cfg.labeled);
    for i in 0..cfg.labeled {
        let mut rng = root.fork_named("query-scene").fork(i as u64);
        let mut occupants = vec![PersonKind::Labeled(i)];
        if cfg.unlabeled > 0 && rng.uniform() < 0.5 {
            occupants.push(PersonKind::Distractor(rng.below(cfg.unlabeled)));
        }
        let scene = render_scene(&mut rng, i as u64, &occupants, i % cfg.cameras, &book, cfg)?;
        // The queried person is occupant 0, so its annotation comes first.
        let bbox = scene.persons[0].bbox;
        query_scenes.push(scene);
        queries.push(Query { scene: i, identity: i, bbox, true_gallery: i });
    }

    let mut gallery = Vec::with_capacity(cfg.gallery_scenes);
    for g in 0..cfg.gallery_scenes {
        let mut rng = root.fork_named("gallery-scene").fork(g as u64);
        let mut occupants = Vec::new();
        if g < cfg.labeled {
            // The one true match for query g, seen from another camera.
            occupants.push(PersonKind::Labeled(g));
        }
        if cfg.unlabeled > 0 {
            let extra = if g < cfg.labeled { rng.below(2) + 1 } else { rng.below(3) + 1 };
            for _ in 0..extra {
                let kind = PersonKind::Distractor(rng.below(cfg.unlabeled));
                if !occupants.contains(&kind) {
                    occupants.push(kind);
                }
            }
        }
        let camera = (g + 1) % cfg.cameras;
        gallery.push(render_scene(&mut rng, g as u64, &occupants, camera, &book, cfg)?);
    }

    Ok(Dataset { config: cfg.clone(), train, query_scenes, gallery, queries })
}

// ---------------------------------------------------------------------------
// Persistence. Layout under the dataset directory:
//   manifest.txt             key = value pairs plus a content hash
//   {train,query,gallery}_images.bin   IMG1 header + f32-LE pixels
//   {train,query,gallery}_annotations.txt   scene/person records
//   queries.txt              one record per query
// Images: magic "IMG1", u32-LE version, scene count, channels, height,
// width, then scenes in order, each 3*h*w little-endian f32 values.
// Annotations: "scene <idx> camera <id> persons <count>" followed by
// <count> lines "person <cx> <cy> <w> <h> <label>", label an integer or
// "u" for unlabeled. Floats print in Rust's shortest round-trip form.

const IMAGE_MAGIC: &[u8; 4] = b"IMG1";
const FORMAT_VERSION: u32 = 1;

const DATA_FILES: [&str; 7] = [
    "train_images.bin",
    "train_annotations.txt",
    "query_images.bin",
    "query_annotations.txt",
    "gallery_images.bin",
    "gallery_annotations.txt",
    "queries.txt",
];

fn encode_images(scenes: &[Scene], size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + scenes.len() * 3 * size * size * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [FORMAT_VERSION, scenes.len() as u32, 3, size as u32, size as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in scenes {
        for &px in &s.image {
            out.extend_from_slice(&px.to_le_bytes());
        }
    }
    out
}

fn decode_images(path: &str, bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    let fail = |msg: String| Err(Error::format(path, msg));
    if bytes.len() < 24 {
        return fail("header truncated".into());
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return fail("bad magic, not an image archive".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FORMAT_VERSION {
        return fail(format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    let (n, c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if c != 3 || h != w {
        return fail(format!("unsupported dims {c}x{h}x{w}"));
    }
    let per_scene = 3 * h * w;
    let need = 24 + n * per_scene * 4;
    if bytes.len() != need {
        return fail(format!("expected {need} bytes, got {}", bytes.len()));
    }
    let mut scenes = Vec::with_capacity(n);
    let mut off = 24;
    for _ in 0..n {
        let mut img = Vec::with_capacity(per_scene);
        for _ in 0..per_scene {
            img.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        scenes.push(img);
    }
    Ok((h, scenes))
}

fn encode_annotations(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for (idx, s) in scenes.iter().enumerate() {
        out.push_str(&format!(
            "scene {idx} camera {} persons {}\n",
            s.camera_id,
            s.persons.len()
        ));
        for p in &s.persons {
            let label = match p.id {
                Some(i) => i.to_string(),
                None => "u".to_string(),
            };
            out.push_str(&format!(
                "person {} {} {} {} {label}\n",
                p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h
            ));
        }
    }
    out
}

fn parse_f64(path: &str, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::format(path, format!("bad float {tok:?}")))
}

fn parse_usize(path: &str, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::format(path, format!("bad integer {tok:?}")))
}

fn decode_annotations(path: &str, text: &str, images: Vec<Vec<f32>>, size: usize) -> Result<Vec<Scene>> {
    let mut scenes = Vec::with_capacity(images.len());
    let mut lines = text.lines().peekable();
    for (idx, image) in images.into_iter().enumerate() {
        let header = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing scene {idx} header")))?;
        let t: Vec<&str> = header.split_whitespace().collect();
        if t.len() != 6 || t[0] != "scene" || t[2] != "camera" || t[4] != "persons" {
            return Err(Error::format(path, format!("bad scene header {header:?}")));
        }
        if parse_usize(path, t[1])? != idx {
            return Err(Error::format(path, format!("scene index mismatch in {header:?}")));
        }
        let camera_id = parse_usize(path, t[3])?;
        let count = parse_usize(path, t[5])?;
        let mut persons = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("scene {idx} truncated")))?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 6 || t[0] != "person" {
                return Err(Error::format(path, format!("bad person record {line:?}")));
            }
            let id = if t[5] == "u" { None } else { Some(parse_usize(path, t[5])?) };
            persons.push(ScenePerson {
                bbox: BoxCxcywh::new(
                    parse_f64(path, t[1])?,
                    parse_f64(path, t[2])?,
                    parse_f64(path, t[3])?,
                    parse_f64(path, t[4])?,
                ),
                id,
            });
        }
        scenes.push(Scene { image, size, persons, camera_id });
    }
    if lines.next().is_some() {
        return Err(Error::format(path, "trailing annotation records"));
    }
    Ok(scenes)
}

fn encode_queries(queries: &[Query]) -> String {
    let mut out = String::new();
    for (idx, q) in queries.iter().enumerate() {
        out.push_str(&format!(
            "query {idx} scene {} id {} gallery {} box {} {} {} {}\n",
            q.scene, q.identity, q.true_gallery, q.bbox.cx, q.bbox.cy, q.bbox.w, q.bbox.h
        ));
    }
    out
}

fn decode_queries(path: &str, text: &str) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 13
            || t[0] != "query"
            || t[2] != "scene"
            || t[4] != "id"
            || t[6] != "gallery"
            || t[8] != "box"
        {
            return Err(Error::format(path, format!("bad query record {line:?}")));
        }
        if parse_usize(path, t[1])? != out.len() {
            return Err(Error::format(path, format!("query index mismatch in {line:?}")));
        }
        out.push(Query {
            scene: parse_usize(path, t[3])?,
            identity: parse_usize(path, t[5])?,
            true_gallery: parse_usize(path, t[7])?,
            bbox: BoxCxcywh::new(
                parse_f64(path, t[9])?,
                parse_f64(path, t[10])?,
                parse_f64(path, t[11])?,
                parse_f64(path, t[12])?,
            ),
        });
    }
    Ok(out)
}

fn content_hash(files: &[(String, Vec<u8>)]) -> String {
    let mut hasher = Sha256::new();
    for (_, bytes) in files {
        hasher.update(bytes);
    }
    hex::encode(hasher.finalize())
}

fn encode_manifest(cfg: &DataConfig, hash: &str) -> String {
    format!(
        "format_version = {FORMAT_VERSION}\n\
         seed = {}\n\
         image_size = {}\n\
         base_glyph_w = {}\n\
         base_glyph_h = {}\n\
         scale_min = {}\n\
         scale_max = {}\n\
         persons_min = {}\n\
         persons_max = {}\n\
         labeled = {}\n\
         unlabeled = {}\n\
         train_scenes = {}\n\
         gallery_scenes = {}\n\
         cameras = {}\n\
         max_overlap = {}\n\
         content_hash = {hash}\n",
        cfg.seed,
        cfg.image_size,
        cfg.base_glyph.0,
        cfg.base_glyph.1,
        cfg.scale_range.0,
        cfg.scale_range.1,
        cfg.persons_per_scene.0,
        cfg.persons_per_scene.1,
        cfg.labeled,
        cfg.unlabeled,
        cfg.train_scenes,
        cfg.gallery_scenes,
        cfg.cameras,
        cfg.max_overlap,
    )
}

fn decode_manifest(path: &str, text: &str) -> Result<(DataConfig, String)> {
    let mut cfg = DataConfig::default();
    let mut hash = None;
    let mut version = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad manifest line {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format_version" => version = Some(parse_usize(path, value)? as u32),
            "seed" => cfg.seed = parse_usize(path, value)? as u64,
            "image_size" => cfg.image_size = parse_usize(path, value)?,
            "base_glyph_w" => cfg.base_glyph.0 = parse_usize(path, value)?,
            "base_glyph_h" => cfg.base_glyph.1 = parse_usize(path, value)?,
            "scale_min" => cfg.scale_range.0 = parse_f64(path, value)?,
            "scale_max" => cfg.scale_range.1 = parse_f64(path, value)?,
            "persons_min" => cfg.persons_per_scene.0 = parse_usize(path, value)?,
            "persons_max" => cfg.persons_per_scene.1 = parse_usize(path, value)?,
            "labeled" => cfg.labeled = parse_usize(path, value)?,
            "unlabeled" => cfg.unlabeled = parse_usize(path, value)?,
            "train_scenes" => cfg.train_scenes = parse_usize(path, value)?,
            "gallery_scenes" => cfg.gallery_scenes = parse_usize(path, value)?,
            "cameras" => cfg.cameras = parse_usize(path, value)?,
            "max_overlap" => cfg.max_overlap = parse_f64(path, value)?,
            "content_hash" => hash = Some(value.to_string()),
            other => return Err(Error::format(path, format!("unknown manifest key {other:?}"))),
        }
    }
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::format(path, format!("unsupported manifest version {v}"))),
        None => return Err(Error::format(path, "manifest missing format_version")),
    }
    let hash = hash.ok_or_else(|| Error::format(path, "manifest missing content_hash"))?;
    Ok((cfg, hash))
}

fn serialize_files(d: &Dataset) -> Vec<(String, Vec<u8>)> {
    let s = d.config.image_size;
    DATA_FILES
        .iter()
        .map(|&name| {
            let bytes = match name {
                "train_images.bin" => encode_images(&d.train, s),
                "train_annotations.txt" => encode_annotations(&d.train).into_bytes(),
                "query_images.bin" => encode_images(&d.query_scenes, s),
                "query_annotations.txt" => encode_annotations(&d.query_scenes).into_bytes(),
                "gallery_images.bin" => encode_images(&d.gallery, s),
                "gallery_annotations.txt" => encode_annotations(&d.gallery).into_bytes(),
                "queries.txt" => encode_queries(&d.queries).into_bytes(),
                _ => unreachable!(),
            };
            (name.to_string(), bytes)
        })
        .collect()
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let files = serialize_files(d);
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let manifest = encode_manifest(&d.config, &content_hash(&files));
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let manifest_text = String::from_utf8(read("manifest.txt")?)
        .map_err(|_| Error::format("manifest.txt", "not utf-8"))?;
    let (cfg, expected_hash) = decode_manifest("manifest.txt", &manifest_text)?;

    let files: Vec<(String, Vec<u8>)> = DATA_FILES
        .iter()
        .map(|&name| Ok((name.to_string(), read(name)?)))
        .collect::<Result<_>>()?;
    let actual = content_hash(&files);
    if actual != expected_hash {
        return Err(Error::format(
            "manifest.txt",
            format!("content hash mismatch: manifest {expected_hash}, files {actual}"),
        ));
    }
    let by_name = |name: &str| -> &[u8] {
        &files.iter().find(|(n, _)| n == name).unwrap().1
    };
    let text = |name: &str| -> Result<String> {
        String::from_utf8(by_name(name).to_vec()).map_err(|_| Error::format(name, "not utf-8"))
    };

    let split = |img: &str, ann: &str| -> Result<Vec<Scene>> {
        let (size, images) = decode_images(img, by_name(img))?;
        if size != cfg.image_size {
            return Err(Error::format(img, format!("image size {size} contradicts manifest")));
        }
        decode_annotations(ann, &text(ann)?, images, size)
    };
    let train = split("train_images.bin", "train_annotations.txt")?;
    let query_scenes = split("query_images.bin", "query_annotations.txt")?;
    let gallery = split("gallery_images.bin", "gallery_annotations.txt")?;
    let queries = decode_queries("queries.txt", &text("queries.txt")?)?;

    for (name, got, want) in [
        ("train", train.len(), cfg.train_scenes),
        ("query", query_scenes.len(), cfg.labeled),
        ("gallery", gallery.len(), cfg.gallery_scenes),
        ("queries", queries.len(), cfg.labeled),
    ] {
        if got != want {
            return Err(Error::format(
                "manifest.txt",
                format!("{name} count {got} contradicts manifest {want}"),
            ));
        }
    }
    Ok(Dataset { config: cfg, train, query_scenes, gallery, queries })
}
