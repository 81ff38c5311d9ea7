//! Deterministic synthetic benchmark: colored shapes on textured "stuff"
//! backgrounds, one phrase per shape group plus one per background region,
//! with exact rasterized masks and thing/stuff, singular/plural tags.

use crate::codec::BinaryMask;
use crate::eval::{Number, ThingStuff};
use crate::rng::{derive_seed, rng_from_seed};
use crate::text::PhraseVocabulary;
use crate::{Error, Result};
use rand::Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

const MANIFEST_VERSION_LINE: &str = "labeldiff-manifest v1";
const MAX_TOTAL_INSTANCES: usize = 4;
const PLACEMENT_RETRIES: usize = 200;

/// Shape colors: word plus base RGB.
const SHAPE_COLORS: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("blue", [40, 60, 220]),
    ("green", [40, 190, 40]),
    ("yellow", [235, 210, 40]),
    ("purple", [160, 40, 210]),
    ("orange", [245, 140, 30]),
];

/// Background kinds: color word, noun, base RGB. The color word also names
/// the shape color a background excludes from its scene.
const STUFF_KINDS: &[(&str, &str, [u8; 3])] = &[
    ("green", "grass", [60, 165, 60]),
    ("blue", "water", [45, 110, 215]),
    ("yellow", "sand", [215, 195, 110]),
    ("gray", "road", [125, 125, 125]),
];

const COUNT_WORDS: &[&str] = &["two", "three"];

/// One annotated noun phrase of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePhrase {
    pub text: String,
    pub mask: BinaryMask,
    pub thing_stuff: ThingStuff,
    pub number: Number,
}

/// A synthetic image with its phrase-mask annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: image::RgbImage,
    pub phrases: Vec<ScenePhrase>,
    /// Background region: every pixel not covered by a shape.
    pub background: BinaryMask,
    pub seed: u64,
}

/// Generator knobs.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of thing groups per scene.
    pub shape_count_range: (usize, usize),
    /// Probability a group is plural (2-3 instances).
    pub plural_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            shape_count_range: (1, 3),
            plural_prob: 0.35,
        }
    }
}

/// The closed grammar every phrase draws from.
pub fn grammar_vocabulary() -> PhraseVocabulary {
    let mut tokens: Vec<String> = Vec::new();
    for (w, _) in SHAPE_COLORS {
        tokens.push(w.to_string());
    }
    for noun in ["circle", "square", "triangle", "circles", "squares", "triangles"] {
        tokens.push(noun.to_string());
    }
    for w in COUNT_WORDS {
        tokens.push(w.to_string());
    }
    for (color, noun, _) in STUFF_KINDS {
        if !tokens.iter().any(|t| t == color) {
            tokens.push(color.to_string());
        }
        tokens.push(noun.to_string());
    }
    PhraseVocabulary::new(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (ShapeKind::Circle, false) => "circle",
            (ShapeKind::Circle, true) => "circles",
            (ShapeKind::Square, false) => "square",
            (ShapeKind::Square, true) => "squares",
            (ShapeKind::Triangle, false) => "triangle",
            (ShapeKind::Triangle, true) => "triangles",
        }
    }
}

#[derive(Debug, Clone)]
struct Instance {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
}

impl Instance {
    fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match self.kind {
            ShapeKind::Circle => {
                let dx = px - self.cx;
                let dy = py - self.cy;
                dx * dx + dy * dy <= self.size * self.size
            }
            ShapeKind::Square => {
                (px - self.cx).abs() <= self.size && (py - self.cy).abs() <= self.size
            }
            ShapeKind::Triangle => {
                // upward isoceles: apex at (cx, cy-size), base at cy+size,
                // base half-width 1.2x the half-height
                let h = 2.0 * self.size;
                let rel_y = py - (self.cy - self.size);
                if !(0.0..=h).contains(&rel_y) {
                    return false;
                }
                let half_width = 1.2 * self.size * (rel_y / h);
                (px - self.cx).abs() <= half_width
            }
        }
    }

    /// Conservative bounding radius for overlap rejection.
    fn radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Circle => self.size,
            ShapeKind::Square => self.size * std::f64::consts::SQRT_2,
            ShapeKind::Triangle => self.size * 1.6,
        }
    }

    fn rasterize(&self, size: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(size, size);
        let r = self.radius().ceil() as isize + 1;
        let y0 = ((self.cy as isize) - r).max(0) as usize;
        let y1 = (((self.cy as isize) + r) as usize).min(size - 1);
        let x0 = ((self.cx as isize) - r).max(0) as usize;
        let x1 = (((self.cx as isize) + r) as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x, y) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

fn noise_channel(base: u8, amp: i32, rng: &mut impl Rng) -> u8 {
    let delta = rng.gen_range(-amp..=amp);
    (base as i32 + delta).clamp(0, 255) as u8
}

/// Generate one scene deterministically from its seed.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    let size = spec.image_size;
    if size % 8 != 0 || size == 0 {
        return Err(Error::parameter(format!(
            "image size {size} must be a positive multiple of 8"
        )));
    }
    if spec.shape_count_range.0 < 1 || spec.shape_count_range.0 > spec.shape_count_range.1 {
        return Err(Error::parameter("invalid shape count range"));
    }
    let mut rng = rng_from_seed(seed);
    let unit = size as f64 / 64.0;

    let stuff = STUFF_KINDS[rng.gen_range(0..STUFF_KINDS.len())];
    let mut available_colors: Vec<usize> = (0..SHAPE_COLORS.len())
        .filter(|&i| SHAPE_COLORS[i].0 != stuff.0)
        .collect();

    let n_groups = rng.gen_range(spec.shape_count_range.0..=spec.shape_count_range.1);
    let mut groups: Vec<(usize, ShapeKind, usize)> = Vec::new(); // (color idx, kind, count)
    let mut total_instances = 0usize;
    for _ in 0..n_groups {
        if available_colors.is_empty() {
            break;
        }
        let color = available_colors.remove(rng.gen_range(0..available_colors.len()));
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let plural = rng.gen::<f64>() < spec.plural_prob;
        let count = if plural && total_instances + 2 <= MAX_TOTAL_INSTANCES {
            rng.gen_range(2..=(MAX_TOTAL_INSTANCES - total_instances).min(3))
        } else {
            1
        };
        total_instances += count;
        groups.push((color, kind, count));
        if total_instances >= MAX_TOTAL_INSTANCES {
            break;
        }
    }

    // plan sizes first: shared budget scaling keeps crowded scenes packable
    let scale_budget = 1.0 / (1.0 + 0.16 * (total_instances.saturating_sub(1)) as f64);
    let mut plan: Vec<(usize, Instance)> = Vec::new(); // (group idx, unplaced instance)
    for (gi, &(_, kind, count)) in groups.iter().enumerate() {
        for _ in 0..count {
            let member_scale = if count > 1 { 0.8 } else { 1.0 };
            let half = match kind {
                ShapeKind::Circle => rng.gen_range(8.5..=13.5),
                ShapeKind::Square => rng.gen_range(7.5..=12.0),
                ShapeKind::Triangle => rng.gen_range(8.5..=13.0),
            } * unit
                * member_scale
                * scale_budget;
            plan.push((gi, Instance { kind, cx: 0.0, cy: 0.0, size: half }));
        }
    }
    // largest shapes place first; stable sort keeps this seed-deterministic
    plan.sort_by(|a, b| b.1.radius().partial_cmp(&a.1.radius()).unwrap());

    let gap = (2.0 * unit).max(1.0);
    let min_half = 4.0 * unit;
    let mut placed: Vec<Instance> = Vec::new();
    let mut group_instances: Vec<Vec<Instance>> = vec![Vec::new(); groups.len()];
    for (gi, proto) in plan {
        let mut half = proto.size;
        let kind = proto.kind;
        let is_clear = |placed: &[Instance], cand: &Instance| {
            placed.iter().all(|p| {
                let dx = p.cx - cand.cx;
                let dy = p.cy - cand.cy;
                (dx * dx + dy * dy).sqrt() >= p.radius() + cand.radius() + gap
            })
        };
        let mut ok = false;
        'shrink: for _round in 0..PLACEMENT_RETRIES {
            for _try in 0..120 {
                let margin = Instance { kind, cx: 0.0, cy: 0.0, size: half }.radius() + 2.0;
                if 2.0 * margin >= size as f64 {
                    break;
                }
                let cx = rng.gen_range(margin..size as f64 - margin);
                let cy = rng.gen_range(margin..size as f64 - margin);
                let cand = Instance { kind, cx, cy, size: half };
                if is_clear(&placed, &cand) {
                    placed.push(cand.clone());
                    group_instances[gi].push(cand);
                    ok = true;
                    break 'shrink;
                }
            }
            half *= 0.9;
            if half < min_half {
                break;
            }
        }
        if !ok {
            // deterministic sweep at the minimum size before giving up
            let margin = Instance { kind, cx: 0.0, cy: 0.0, size: min_half }.radius() + 2.0;
            let mut cy = margin;
            'sweep: while cy < size as f64 - margin {
                let mut cx = margin;
                while cx < size as f64 - margin {
                    let cand = Instance { kind, cx, cy, size: min_half };
                    if is_clear(&placed, &cand) {
                        placed.push(cand.clone());
                        group_instances[gi].push(cand);
                        ok = true;
                        break 'sweep;
                    }
                    cx += 2.0;
                }
                cy += 2.0;
            }
        }
        if !ok {
            let state: Vec<String> = placed
                .iter()
                .map(|p| format!("{:?} r={:.1} at ({:.0},{:.0})", p.kind, p.radius(), p.cx, p.cy))
                .collect();
            return Err(Error::Generation(format!(
                "could not place {kind:?} (half {half:.2}) after {PLACEMENT_RETRIES} shrink rounds (seed {seed}); placed: [{}]",
                state.join(", ")
            )));
        }
    }

    // background fill with texture noise
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = image::Rgb([
                noise_channel(stuff.2[0], 12, &mut rng),
                noise_channel(stuff.2[1], 12, &mut rng),
                noise_channel(stuff.2[2], 12, &mut rng),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }

    // draw instances and collect group masks
    let mut phrases = Vec::new();
    let mut any_shape = BinaryMask::zeros(size, size);
    for ((color_idx, kind, count), members) in groups.iter().zip(&group_instances) {
        let (color_word, base) = SHAPE_COLORS[*color_idx];
        let mut group_mask = BinaryMask::zeros(size, size);
        for inst in members {
            let mask = inst.rasterize(size);
            if mask.count_ones() == 0 {
                return Err(Error::Generation(format!(
                    "degenerate shape rasterized empty (seed {seed})"
                )));
            }
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) {
                        let px = image::Rgb([
                            noise_channel(base[0], 8, &mut rng),
                            noise_channel(base[1], 8, &mut rng),
                            noise_channel(base[2], 8, &mut rng),
                        ]);
                        img.put_pixel(x as u32, y as u32, px);
                    }
                }
            }
            group_mask = group_mask.union(&mask)?;
        }
        any_shape = any_shape.union(&group_mask)?;
        let plural = *count > 1;
        let text = if plural {
            format!("{} {} {}", COUNT_WORDS[*count - 2], color_word, kind.noun(true))
        } else {
            format!("{} {}", color_word, kind.noun(false))
        };
        phrases.push(ScenePhrase {
            text,
            mask: group_mask,
            thing_stuff: ThingStuff::Thing,
            number: if plural { Number::Plural } else { Number::Singular },
        });
    }

    // background phrase covers every non-shape pixel
    let mut background = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            background.set(y, x, !any_shape.get(y, x));
        }
    }
    if background.count_ones() * 10 < size * size {
        return Err(Error::Generation(format!(
            "background covers under 10% of pixels (seed {seed})"
        )));
    }
    phrases.push(ScenePhrase {
        text: format!("{} {}", stuff.0, stuff.1),
        mask: background.clone(),
        thing_stuff: ThingStuff::Stuff,
        number: Number::Singular,
    });

    Ok(Scene {
        image: img,
        phrases,
        background,
        seed,
    })
}

/// Generate `count` scenes from derived per-scene seeds, writing them to
/// `dir` incrementally (images/, masks/, manifest.txt).
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, spec: &SceneSpec) -> Result<()> {
    let mut writer = ManifestWriter::create(dir)?;
    for i in 0..count {
        let scene = generate_scene(derive_seed(seed, i as u64), spec)?;
        writer.add_scene(&scene)?;
    }
    writer.finish()
}

/// Incremental manifest writer; single writer, one record line per scene.
pub struct ManifestWriter {
    dir: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
    count: usize,
}

impl ManifestWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
        writeln!(file, "{MANIFEST_VERSION_LINE}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            file,
            count: 0,
        })
    }

    pub fn add_scene(&mut self, scene: &Scene) -> Result<()> {
        let id = format!("{:04}", self.count);
        let image_rel = format!("images/{id}.png");
        scene.image.save(self.dir.join(&image_rel))?;
        let mut parts = Vec::new();
        for (k, p) in scene.phrases.iter().enumerate() {
            let mask_rel = format!("masks/{id}_{k}.png");
            p.mask.save_png(&self.dir.join(&mask_rel))?;
            let ts = match p.thing_stuff {
                ThingStuff::Thing => "thing",
                ThingStuff::Stuff => "stuff",
            };
            let num = match p.number {
                Number::Singular => "singular",
                Number::Plural => "plural",
            };
            parts.push(format!("{};{};{};{}", p.text, mask_rel, ts, num));
        }
        writeln!(
            self.file,
            "{id}\t{image_rel}\t{}\t{}",
            scene.seed,
            parts.join("|")
        )?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Write a slice of scenes as a dataset directory.
pub fn write_manifest(scenes: &[Scene], dir: &Path) -> Result<()> {
    let mut w = ManifestWriter::create(dir)?;
    for s in scenes {
        w.add_scene(s)?;
    }
    w.finish()
}

/// Parsed manifest line (paths only; pixels load on demand).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub seed: u64,
    pub phrases: Vec<ManifestPhraseEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestPhraseEntry {
    pub text: String,
    pub mask_path: String,
    pub thing_stuff: ThingStuff,
    pub number: Number,
}

/// Lightweight dataset index; scene pixels are loaded per entry so iteration
/// memory stays independent of dataset size.
#[derive(Debug, Clone)]
pub struct ManifestIndex {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::data(format!(
            "manifest line {lineno}: expected 4 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let seed: u64 = fields[2]
        .parse()
        .map_err(|_| Error::data(format!("manifest line {lineno}: bad seed {}", fields[2])))?;
    let mut phrases = Vec::new();
    for part in fields[3].split('|') {
        let sub: Vec<&str> = part.split(';').collect();
        if sub.len() != 4 {
            return Err(Error::data(format!(
                "manifest line {lineno}: bad phrase record `{part}`"
            )));
        }
        let thing_stuff = match sub[2] {
            "thing" => ThingStuff::Thing,
            "stuff" => ThingStuff::Stuff,
            other => {
                return Err(Error::data(format!(
                    "manifest line {lineno}: unknown category tag `{other}`"
                )))
            }
        };
        let number = match sub[3] {
            "singular" => Number::Singular,
            "plural" => Number::Plural,
            other => {
                return Err(Error::data(format!(
                    "manifest line {lineno}: unknown number tag `{other}`"
                )))
            }
        };
        phrases.push(ManifestPhraseEntry {
            text: sub[0].to_string(),
            mask_path: sub[1].to_string(),
            thing_stuff,
            number,
        });
    }
    Ok(ManifestEntry {
        id: fields[0].to_string(),
        image_path: fields[1].to_string(),
        seed,
        phrases,
    })
}

/// Parse manifest.txt; referenced files are validated to exist.
pub fn load_manifest_index(dir: &Path) -> Result<ManifestIndex> {
    let path = dir.join("manifest.txt");
    let f = std::fs::File::open(&path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let version = lines
        .next()
        .ok_or_else(|| Error::data("empty manifest".to_string()))?
        .map_err(Error::Io)?;
    if version != MANIFEST_VERSION_LINE {
        return Err(Error::data(format!(
            "manifest version mismatch: `{version}` (expected `{MANIFEST_VERSION_LINE}`)"
        )));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() {
            continue;
        }
        let entry = parse_manifest_line(&line, i + 2)?;
        let img = dir.join(&entry.image_path);
        if !img.exists() {
            return Err(Error::data(format!(
                "entry {}: missing image file {}",
                entry.id,
                img.display()
            )));
        }
        for p in &entry.phrases {
            let mp = dir.join(&p.mask_path);
            if !mp.exists() {
                return Err(Error::data(format!(
                    "entry {}: missing mask file {}",
                    entry.id,
                    mp.display()
                )));
            }
        }
        entries.push(entry);
    }
    Ok(ManifestIndex {
        dir: dir.to_path_buf(),
        entries,
    })
}

impl ManifestIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load one scene's pixels.
    pub fn load_scene(&self, i: usize) -> Result<Scene> {
        let entry = &self.entries[i];
        let image = image::open(self.dir.join(&entry.image_path))
            .map_err(|e| Error::data(format!("entry {}: {e}", entry.id)))?
            .into_rgb8();
        let mut phrases = Vec::new();
        for p in &entry.phrases {
            let mask = BinaryMask::load_png(&self.dir.join(&p.mask_path))?;
            phrases.push(ScenePhrase {
                text: p.text.clone(),
                mask,
                thing_stuff: p.thing_stuff,
                number: p.number,
            });
        }
        // background is the complement of all thing masks
        let (h, w) = phrases
            .first()
            .map(|p| p.mask.shape())
            .unwrap_or((image.height() as usize, image.width() as usize));
        let mut background = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let covered = phrases
                    .iter()
                    .filter(|p| p.thing_stuff == ThingStuff::Thing)
                    .any(|p| p.mask.get(y, x));
                background.set(y, x, !covered);
            }
        }
        Ok(Scene {
            image,
            phrases,
            background,
            seed: entry.seed,
        })
    }

    /// Stream scenes one at a time with bounded memory.
    pub fn stream(&self) -> impl Iterator<Item = Result<Scene>> + '_ {
        (0..self.len()).map(move |i| self.load_scene(i))
    }
}

/// Seed-deterministic disjoint, exhaustive train/test split of scene indices.
pub fn split_dataset(n_scenes: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&train_frac) || train_frac <= 0.0 {
        return Err(Error::parameter(format!(
            "train fraction {train_frac} must lie in (0,1)"
        )));
    }
    let n_train = (n_scenes as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train == n_scenes {
        return Err(Error::parameter(format!(
            "degenerate split: {n_train}/{} scenes in train",
            n_scenes
        )));
    }
    let mut indices: Vec<usize> = (0..n_scenes).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 0x5370_6c69));
    crate::rng::shuffle(&mut indices, &mut rng);
    let (train, test) = indices.split_at(n_train);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
