//! Procedural scenes of one coloured shape on a plain background, with
//! paraphrased captions and a class-disjoint train/test split.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($text => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

named_enum!(ShapeKind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
});

named_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    Cyan => "cyan",
    Brown => "brown",
    White => "white",
    Black => "black",
    Gray => "gray",
});

named_enum!(Size {
    Small => "small",
    Large => "large",
});

named_enum!(Position {
    Center => "center",
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
});

pub const FG_COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Purple,
    Color::Orange,
    Color::Cyan,
    Color::Brown,
];
pub const BG_COLORS: [Color; 4] = [Color::White, Color::Black, Color::Gray, Color::Yellow];
pub const NUM_CLASSES: usize = 32;
pub const TRAIN_CLASSES: usize = 24;
pub const RESOLUTIONS: [usize; 3] = [8, 16, 32];

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 170, 50],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [240, 220, 40],
            Color::Purple => [140, 50, 170],
            Color::Orange => [245, 140, 20],
            Color::Cyan => [40, 210, 220],
            Color::Brown => [120, 75, 35],
            Color::White => [250, 250, 250],
            Color::Black => [10, 10, 10],
            Color::Gray => [128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub fg: Color,
    pub bg: Color,
    pub size: Size,
    pub position: Position,
}

impl SceneSpec {
    /// Checks the enumerations and `fg ≠ bg`.
    pub fn new(shape: ShapeKind, fg: Color, bg: Color, size: Size, position: Position) -> Result<Self> {
        if !FG_COLORS.contains(&fg) || !BG_COLORS.contains(&bg) || fg == bg {
            return Err(Error::invalid("scene", alloc::format!("invalid colours {} on {}", fg.name(), bg.name())));
        }
        Ok(SceneSpec {
            shape,
            fg,
            bg,
            size,
            position,
        })
    }

    /// `(shape, fg)` packed as `shape·8 + colour`.
    pub fn class_id(&self) -> usize {
        class_id(self.shape, self.fg)
    }

    /// A random valid scene of the given class.
    pub fn sample(class: usize, rng: &mut impl Rng) -> Self {
        let (shape, fg) = class_parts(class);
        let bgs: Vec<Color> = BG_COLORS.iter().copied().filter(|&c| c != fg).collect();
        SceneSpec {
            shape,
            fg,
            bg: bgs[rng.random_range(0..bgs.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            position: Position::ALL[rng.random_range(0..Position::ALL.len())],
        }
    }
}

pub fn class_id(shape: ShapeKind, fg: Color) -> usize {
    let c = FG_COLORS.iter().position(|&f| f == fg).expect("foreground colour");
    shape.index() * FG_COLORS.len() + c
}

pub fn class_parts(class: usize) -> (ShapeKind, Color) {
    (ShapeKind::ALL[class / FG_COLORS.len()], FG_COLORS[class % FG_COLORS.len()])
}

fn centre(p: Position) -> (f64, f64) {
    match p {
        Position::Center => (0.5, 0.5),
        Position::Left => (0.3, 0.5),
        Position::Right => (0.7, 0.5),
        Position::Top => (0.5, 0.3),
        Position::Bottom => (0.5, 0.7),
    }
}

/// Shape radius as a fraction of the image side.
pub fn radius(s: Size) -> f64 {
    match s {
        Size::Small => 0.15,
        Size::Large => 0.28,
    }
}

/// Whether the point `(x, y)` (unit square, y down) lies inside the shape.
fn inside(spec: &SceneSpec, x: f64, y: f64) -> bool {
    let (cx, cy) = centre(spec.position);
    let r = radius(spec.size);
    let (dx, dy) = (x - cx, y - cy);
    match spec.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Triangle => {
            // apex up, base down
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        ShapeKind::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// `[3×R×R]` image in `[−1, 1]`, sampled at pixel centres without anti-aliasing.
pub fn render(spec: &SceneSpec, resolution: usize) -> Result<Tensor> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::invalid("render", alloc::format!("unsupported resolution {resolution}")));
    }
    let r = resolution;
    let (fg, bg) = (spec.fg.rgb(), spec.bg.rgb());
    let mut data = alloc::vec![0.0; 3 * r * r];
    for py in 0..r {
        for px in 0..r {
            let (x, y) = ((px as f64 + 0.5) / r as f64, (py as f64 + 0.5) / r as f64);
            let rgb = if inside(spec, x, y) { fg } else { bg };
            for c in 0..3 {
                data[(c * r + py) * r + px] = rgb[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(&[3, r, r], data)
}

/// Caption templates; `{size}`, `{color}`, `{shape}`, `{bg}` and `{pos}` are
/// filled from the scene. None mentions every attribute.
pub const TEMPLATES: [&str; 12] = [
    "a {size} {color} {shape} on a {bg} background",
    "the {shape} is {color}",
    "a {color} {shape}",
    "a {color} {shape} {pos}",
    "there is a {size} {color} {shape} {pos}",
    "{color} {shape} over a {bg} background",
    "this picture shows a {color} {shape}",
    "a {shape} colored {color} on {bg}",
    "a {size} {shape} that is {color}",
    "one {color} {shape} {pos} on a {bg} backdrop",
    "a {bg} image with a {color} {shape}",
    "the {color} {shape} is {size}",
];

fn size_words(s: Size) -> [&'static str; 2] {
    match s {
        Size::Small => ["small", "little"],
        Size::Large => ["large", "big"],
    }
}

fn position_phrase(p: Position) -> &'static str {
    match p {
        Position::Center => "in the middle",
        Position::Left => "on the left",
        Position::Right => "on the right",
        Position::Top => "at the top",
        Position::Bottom => "at the bottom",
    }
}

/// Every word that can appear in a caption.
pub fn caption_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |s: &str| words.extend(s.split_whitespace().map(|w| w.replace(['{', '}'], "")));
    for t in TEMPLATES {
        for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
            push(w);
        }
    }
    for c in Color::ALL {
        push(c.name());
    }
    for s in ShapeKind::ALL {
        push(s.name());
    }
    for s in Size::ALL {
        for w in size_words(*s) {
            push(w);
        }
    }
    for p in Position::ALL {
        push(position_phrase(*p));
    }
    words.sort();
    words.dedup();
    words
}

/// Fills one template for `spec`.
pub fn fill_template(template: &str, spec: &SceneSpec, size_word: &str) -> String {
    template
        .replace("{size}", size_word)
        .replace("{color}", spec.fg.name())
        .replace("{shape}", spec.shape.name())
        .replace("{bg}", spec.bg.name())
        .replace("{pos}", position_phrase(spec.position))
}

/// `k` distinct captions of `spec`, from `k` distinct templates.
pub fn caption(spec: &SceneSpec, k: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    caption_with(&TEMPLATES, spec, k, rng)
}

/// [`caption`] over an explicit template bank.
pub fn caption_with(templates: &[&str], spec: &SceneSpec, k: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    if k > templates.len() {
        return Err(Error::TemplateBankTooSmall {
            wanted: k,
            available: templates.len(),
        });
    }
    let mut order: Vec<usize> = (0..templates.len()).collect();
    order.shuffle(rng);
    let words = size_words(spec.size);
    let mut out: Vec<String> = Vec::with_capacity(k);
    for &t in &order {
        if out.len() == k {
            break;
        }
        let c = fill_template(templates[t], spec, words[rng.random_range(0..2)]);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.len() < k {
        return Err(Error::TemplateBankTooSmall {
            wanted: k,
            available: out.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub spec: SceneSpec,
    pub captions: Vec<String>,
}

impl Scene {
    /// Renders at 8, 16 and 32 pixels.
    pub fn render_all(&self) -> Result<[Tensor; 3]> {
        Ok([render(&self.spec, 8)?, render(&self.spec, 16)?, render(&self.spec, 32)?])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl Dataset {
    pub fn scenes(&self) -> impl Iterator<Item = &Scene> {
        self.train.iter().chain(&self.test)
    }
}

/// Splits the classes 24/8 by `seed`, then draws `n_scenes` scenes that cycle
/// through all classes so both sides get scenes in proportion.
pub fn build_dataset(n_scenes: usize, seed: u64, captions_per_scene: usize) -> Result<Dataset> {
    if n_scenes < 2 * NUM_CLASSES {
        return Err(Error::DatasetTooSmall(alloc::format!("{n_scenes} scenes; need at least {}", 2 * NUM_CLASSES)));
    }
    if captions_per_scene < 2 {
        return Err(Error::DatasetTooSmall("every scene needs at least two captions".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
    classes.shuffle(&mut rng);
    let mut train_classes = classes[..TRAIN_CLASSES].to_vec();
    let mut test_classes = classes[TRAIN_CLASSES..].to_vec();
    train_classes.sort_unstable();
    test_classes.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for id in 0..n_scenes {
        let class = classes[id % NUM_CLASSES];
        let spec = SceneSpec::sample(class, &mut rng);
        let captions = caption(&spec, captions_per_scene, &mut rng)?;
        let scene = Scene { id, spec, captions };
        if test_classes.contains(&class) {
            test.push(scene);
        } else {
            train.push(scene);
        }
    }
    Ok(Dataset {
        train,
        test,
        train_classes,
        test_classes,
    })
}
