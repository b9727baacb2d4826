//! Seeded synthetic exams: a printed template, answer sheets marked with
//! varied pen styles, and perturbed "scans" of those sheets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::LabelTable;
use super::metadata::{ExamMetadata, Question, Rect, RoiBox};
use crate::classifiers::AnswerClass;
use crate::error::{OmrError, Result};
use crate::grading::score_question;
use crate::raster::{to_u8, ColorImage, Plane, Rgb, WHITE};
use crate::registration::{warp, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Every box drawn independently from the class mixture.
    Mixture,
    /// One confirmed mark on the correct choice of every question.
    AnswerKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub max_rotation_deg: f64,
    pub max_shift_px: f64,
    /// Standard deviation of additive noise in intensity levels.
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            max_rotation_deg: 3.0,
            max_shift_px: 10.0,
            noise_sigma: 6.0,
            blur_sigma: 0.6,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            max_rotation_deg: 0.0,
            max_shift_px: 0.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        }
    }

    fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.max_shift_px == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkStyle {
    /// Fraction of the box interior covered by a solid fill.
    pub fill_density: (f64, f64),
    pub stroke_width: (f64, f64),
    /// Random displacement of stroke end points.
    pub jitter_px: f64,
}

impl Default for MarkStyle {
    fn default() -> Self {
        MarkStyle {
            fill_density: (0.55, 0.95),
            stroke_width: (2.0, 3.5),
            jitter_px: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub exam_id: String,
    pub sheets: usize,
    pub questions: usize,
    pub choices: usize,
    pub question_weight: f64,
    /// Outer side of an answer box, border included.
    pub box_size: u32,
    pub border_px: u32,
    /// Probabilities of confirmed, crossed-out and empty boxes.
    pub mixture: [f64; 3],
    pub label_mode: LabelMode,
    pub marks: MarkStyle,
    pub perturbation: Perturbation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            exam_id: "exam0".into(),
            sheets: 30,
            questions: 10,
            choices: 4,
            question_weight: 1.0,
            box_size: 28,
            border_px: 2,
            mixture: [0.25, 0.05, 0.70],
            label_mode: LabelMode::Mixture,
            marks: MarkStyle::default(),
            perturbation: Perturbation::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OmrError::ConfigInvalid(m.to_string()));
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return bad("class mixture must be probabilities summing to 1");
        }
        if self.questions == 0 || self.questions > 40 {
            return bad("questions must be in 1..=40");
        }
        if !(2..=8).contains(&self.choices) {
            return bad("choices must be in 2..=8");
        }
        if !(16..=48).contains(&self.box_size) || self.border_px == 0 || self.border_px * 4 >= self.box_size {
            return bad("box size must be in 16..=48 with a border narrower than a quarter of it");
        }
        if !(self.question_weight > 0.0) {
            return bad("question weight must be positive");
        }
        let p = &self.perturbation;
        if !(0.0..=3.0).contains(&p.max_rotation_deg)
            || !(0.0..=10.0).contains(&p.max_shift_px)
            || p.noise_sigma < 0.0
            || p.blur_sigma < 0.0
        {
            return bad("perturbation must stay within 3 degrees, 10 px and non-negative noise");
        }
        let m = &self.marks;
        for (lo, hi, what) in [
            (m.fill_density.0, m.fill_density.1, "fill density"),
            (m.stroke_width.0, m.stroke_width.1, "stroke width"),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(&format!("{what} range must be positive and ordered"));
            }
        }
        if m.fill_density.1 > 1.0 || m.jitter_px < 0.0 {
            return bad("fill density must be at most 1 and jitter non-negative");
        }
        if self.exam_id.is_empty() || self.exam_id.contains('_') {
            return bad("exam id must be non-empty and must not contain `_`");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSheet {
    /// `examID_sheet_page`, without extension.
    pub name: String,
    pub image: ColorImage,
    /// `[question][choice]`.
    pub labels: Vec<Vec<AnswerClass>>,
    pub awarded: Vec<f64>,
    pub grade: f64,
    /// Maps reference coordinates to sheet coordinates.
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExam {
    pub reference: ColorImage,
    pub metadata: ExamMetadata,
    pub sheets: Vec<SyntheticSheet>,
}

impl SyntheticExam {
    pub fn label_table(&self) -> LabelTable {
        let mut t = LabelTable::new();
        for s in &self.sheets {
            for (q, row) in s.labels.iter().enumerate() {
                for (c, &class) in row.iter().enumerate() {
                    t.insert(&s.name, q, c, class);
                }
            }
        }
        t
    }
}

const PAGE_WIDTH: u32 = 640;
const HEADER_HEIGHT: u32 = 150;
const ROW_PITCH: u32 = 56;
const BOX_LEFT: u32 = 150;
const BOX_PITCH: u32 = 56;
const INK: Rgb<u8> = Rgb([0, 0, 0]);

struct Layout {
    width: u32,
    height: u32,
}

impl Layout {
    fn new(cfg: &SynthConfig) -> Self {
        Layout {
            width: PAGE_WIDTH.max(BOX_LEFT + BOX_PITCH * cfg.choices as u32 + 60),
            height: HEADER_HEIGHT + ROW_PITCH * cfg.questions as u32 + 80,
        }
    }

    fn box_rect(&self, cfg: &SynthConfig, q: usize, c: usize) -> Rect {
        Rect::new(
            BOX_LEFT + BOX_PITCH * c as u32,
            HEADER_HEIGHT + ROW_PITCH * q as u32 + (ROW_PITCH - cfg.box_size) / 2,
            cfg.box_size,
            cfg.box_size,
        )
    }
}

pub fn generate_synthetic_exam(cfg: &SynthConfig) -> Result<SyntheticExam> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = Layout::new(cfg);
    let questions: Vec<Question> = (0..cfg.questions)
        .map(|q| Question {
            index: q,
            page: 0,
            weight: cfg.question_weight,
            correct_choice: rng.random_range(0..cfg.choices),
            choices: (0..cfg.choices)
                .map(|c| RoiBox {
                    rect: layout.box_rect(cfg, q, c),
                    question_index: q,
                    choice_index: c,
                })
                .collect(),
        })
        .collect();
    let metadata = ExamMetadata {
        exam_id: cfg.exam_id.clone(),
        pages: 1,
        questions,
        has_student_id: true,
        student_id_rect: Some(Rect::new(360, 80, 220, 36)),
        reference_size: Some((layout.width, layout.height)),
        reference_image: Some("reference.png".into()),
    };
    metadata.validate()?;
    let reference = render_template(cfg, &layout, &metadata);

    let mut sheets = Vec::with_capacity(cfg.sheets);
    for i in 0..cfg.sheets {
        let labels: Vec<Vec<AnswerClass>> = metadata
            .questions
            .iter()
            .map(|q| {
                (0..cfg.choices)
                    .map(|c| match cfg.label_mode {
                        LabelMode::AnswerKey if c == q.correct_choice => AnswerClass::Confirmed,
                        LabelMode::AnswerKey => AnswerClass::Empty,
                        LabelMode::Mixture => draw_class(&mut rng, &cfg.mixture),
                    })
                    .collect()
            })
            .collect();
        let awarded: Vec<f64> = metadata
            .questions
            .iter()
            .zip(&labels)
            .map(|(q, l)| score_question(l, q.correct_choice, q.weight))
            .collect();

        let mut page = reference.clone();
        let ink = pen_color(&mut rng);
        for (q, row) in metadata.questions.iter().zip(&labels) {
            for (b, &class) in q.choices.iter().zip(row) {
                draw_mark(&mut page, &b.rect, cfg, class, ink, &mut rng);
            }
        }
        let transform = page_transform(&mut rng, &cfg.perturbation, &layout);
        let mut image = if cfg.perturbation.is_identity() {
            page
        } else {
            warp(&page, &transform, (layout.width, layout.height))?
        };
        degrade(&mut image, &cfg.perturbation, &mut rng);
        sheets.push(SyntheticSheet {
            name: format!("{}_{}_1", cfg.exam_id, i + 1),
            image,
            grade: awarded.iter().sum(),
            awarded,
            labels,
            transform,
        });
    }
    Ok(SyntheticExam {
        reference,
        metadata,
        sheets,
    })
}

fn draw_class(rng: &mut ChaCha8Rng, mixture: &[f64; 3]) -> AnswerClass {
    let u: f64 = rng.random();
    if u < mixture[0] {
        AnswerClass::Confirmed
    } else if u < mixture[0] + mixture[1] {
        AnswerClass::CrossedOut
    } else {
        AnswerClass::Empty
    }
}

fn pen_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.random_range(0..3) {
        0 => {
            let v = rng.random_range(10.0..50.0);
            [v, v, v]
        }
        1 => [
            rng.random_range(10.0..40.0),
            rng.random_range(20.0..60.0),
            rng.random_range(100.0..160.0),
        ],
        _ => [
            rng.random_range(40.0..70.0),
            rng.random_range(40.0..70.0),
            rng.random_range(60.0..90.0),
        ],
    }
}

fn page_transform(rng: &mut ChaCha8Rng, p: &Perturbation, layout: &Layout) -> Transform {
    let angle = if p.max_rotation_deg > 0.0 {
        rng.random_range(-p.max_rotation_deg..=p.max_rotation_deg)
    } else {
        0.0
    };
    let mut shift = [0.0; 2];
    for s in &mut shift {
        if p.max_shift_px > 0.0 {
            *s = rng.random_range(-p.max_shift_px..=p.max_shift_px);
        }
    }
    let center = (layout.width as f64 / 2.0, layout.height as f64 / 2.0);
    Transform::rotation_about(angle.to_radians(), center, (shift[0], shift[1]))
}

fn degrade(image: &mut ColorImage, p: &Perturbation, rng: &mut ChaCha8Rng) {
    if p.blur_sigma <= 0.0 && p.noise_sigma <= 0.0 {
        return;
    }
    let mut planes: Vec<Plane> = (0..3).map(|c| Plane::channel(image, c)).collect();
    if p.blur_sigma > 0.0 {
        for plane in &mut planes {
            *plane = plane.gaussian_blur(p.blur_sigma);
        }
    }
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let (w, h) = image.dimensions();
    for y in 0..h {
        for x in 0..w {
            // Sensor noise is shared across channels, as on a gray scanner.
            let n = if p.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let px = Rgb([0, 1, 2].map(|c| to_u8(planes[c].get(x as usize, y as usize) * 255.0 + n)));
            image.put_pixel(x, y, px);
        }
    }
}

fn render_template(cfg: &SynthConfig, layout: &Layout, meta: &ExamMetadata) -> ColorImage {
    let mut img = ColorImage::from_pixel(layout.width, layout.height, WHITE);
    let (w, h) = (layout.width, layout.height);

    // Four distinct fiducials make the page orientation unambiguous.
    fill_rect(&mut img, 16, 16, 28, 28, INK);
    fill_rect(&mut img, w - 44, 16, 28, 28, INK);
    fill_rect(&mut img, w - 36, 24, 12, 12, WHITE);
    fill_rect(&mut img, 16, h - 44, 12, 28, INK);
    fill_rect(&mut img, 32, h - 44, 12, 12, INK);
    fill_rect(&mut img, w - 44, h - 44, 28, 8, INK);
    fill_rect(&mut img, w - 24, h - 44, 8, 28, INK);

    // A timing track whose mark lengths are derived from the exam id.
    let mut track = ChaCha8Rng::seed_from_u64(
        cfg.exam_id.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)),
    );
    let mut y = 70;
    while y + 6 < h - 60 {
        let len = track.random_range(6..20);
        fill_rect(&mut img, 18, y, len, 4, INK);
        y += track.random_range(12..26);
    }

    draw_text(&mut img, 70, 30, 4, &format!("EXAM {}", cfg.exam_id.to_uppercase()));
    draw_text(&mut img, 70, 88, 3, "NAME");
    outline_rect(&mut img, &Rect::new(140, 80, 200, 36), 2);
    draw_text(&mut img, 360 - 60, 88, 3, "ID");
    if let Some(r) = meta.student_id_rect {
        outline_rect(&mut img, &r, 2);
    }
    fill_rect(&mut img, 60, HEADER_HEIGHT - 16, w - 120, 2, INK);

    for q in &meta.questions {
        let first = q.choices[0].rect;
        draw_text(&mut img, 70, first.y + first.h / 2 - 7, 2, &(q.index + 1).to_string());
        for b in &q.choices {
            outline_rect(&mut img, &b.rect, cfg.border_px);
            let letter = (b'A' + b.choice_index as u8) as char;
            draw_text(&mut img, b.rect.right() + 6, b.rect.y + b.rect.h / 2 - 7, 2, &letter.to_string());
        }
    }
    img
}

fn fill_rect(img: &mut ColorImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, color);
        }
    }
}

fn outline_rect(img: &mut ColorImage, r: &Rect, t: u32) {
    fill_rect(img, r.x, r.y, r.w, t, INK);
    fill_rect(img, r.x, r.bottom() - t, r.w, t, INK);
    fill_rect(img, r.x, r.y, t, r.h, INK);
    fill_rect(img, r.right() - t, r.y, t, r.h, INK);
}

fn draw_text(img: &mut ColorImage, x: u32, y: u32, scale: u32, text: &str) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (gy, row) in rows.iter().enumerate() {
                for gx in 0..5 {
                    if row & (0b10000 >> gx) != 0 {
                        fill_rect(img, cx + gx * scale, y + gy as u32 * scale, scale, scale, INK);
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

/// 5×7 bitmap glyphs, one byte per row, most significant of five bits left.
fn glyph(ch: char) -> Option<[u8; 7]> {
    Some(match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        _ => return None,
    })
}

/// Interior of a box: the area inside its printed border.
struct Canvas {
    x0: f64,
    y0: f64,
    size: f64,
}

fn draw_mark(
    img: &mut ColorImage,
    rect: &Rect,
    cfg: &SynthConfig,
    class: AnswerClass,
    ink: [f64; 3],
    rng: &mut ChaCha8Rng,
) {
    let inset = cfg.border_px as f64 + 1.0;
    let canvas = Canvas {
        x0: rect.x as f64 + inset,
        y0: rect.y as f64 + inset,
        size: rect.w as f64 - 2.0 * inset,
    };
    let m = &cfg.marks;
    let width = rng.random_range(m.stroke_width.0..=m.stroke_width.1);
    let jit = |rng: &mut ChaCha8Rng, u: f64, v: f64| -> (f64, f64) {
        let j = m.jitter_px;
        let dx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let dy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        (canvas.x0 + u * canvas.size + dx, canvas.y0 + v * canvas.size + dy)
    };
    let mut strokes: Vec<((f64, f64), (f64, f64))> = Vec::new();
    match class {
        AnswerClass::Empty => return,
        AnswerClass::Confirmed => match rng.random_range(0..3) {
            0 => {
                let d = rng.random_range(m.fill_density.0..=m.fill_density.1);
                let side = d.sqrt() * canvas.size;
                let ox = canvas.x0 + rng.random_range(0.0..=(canvas.size - side));
                let oy = canvas.y0 + rng.random_range(0.0..=(canvas.size - side));
                paint(img, rect, ink, |x, y| {
                    (x >= ox && x < ox + side && y >= oy && y < oy + side) as u8 as f64
                });
                return;
            }
            1 => {
                let a = jit(rng, 0.1, 0.55);
                let b = jit(rng, 0.4, 0.9);
                let c = jit(rng, 0.95, 0.05);
                strokes.push((a, b));
                strokes.push((b, c));
            }
            _ => {
                let lines = ((canvas.size / width) as usize).max(4);
                let mut prev = jit(rng, 0.0, 0.0);
                for i in 1..=lines {
                    let v = i as f64 / lines as f64;
                    let u = if i % 2 == 1 { 1.0 } else { 0.0 };
                    let next = jit(rng, u, v);
                    strokes.push((prev, next));
                    prev = next;
                }
            }
        },
        AnswerClass::CrossedOut => {
            strokes.push((jit(rng, 0.0, 0.0), jit(rng, 1.0, 1.0)));
            strokes.push((jit(rng, 1.0, 0.0), jit(rng, 0.0, 1.0)));
            if rng.random_bool(0.4) {
                strokes.push((jit(rng, 0.0, 0.5), jit(rng, 1.0, 0.5)));
            }
        }
    }
    let half = width / 2.0;
    paint(img, rect, ink, |x, y| {
        strokes
            .iter()
            .map(|&(a, b)| (half + 0.5 - segment_distance((x, y), a, b)).clamp(0.0, 1.0))
            .fold(0.0, f64::max)
    });
}

/// Blends `ink` into the box with per-pixel coverage in [0, 1].
fn paint(img: &mut ColorImage, rect: &Rect, ink: [f64; 3], coverage: impl Fn(f64, f64) -> f64) {
    for y in rect.y..rect.bottom().min(img.height()) {
        for x in rect.x..rect.right().min(img.width()) {
            let a = coverage(x as f64 + 0.5, y as f64 + 0.5);
            if a <= 0.0 {
                continue;
            }
            let p = img.get_pixel_mut(x, y);
            for c in 0..3 {
                let v = p[c] as f64;
                p[c] = to_u8(v + a * (ink[c].min(v) - v));
            }
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}
