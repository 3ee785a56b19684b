//! Synthetic paired digits and synthetic background data.
//!
//! Spoken words are sequences of "phones" drawn from one shared inventory of
//! 13-dim frame vectors, so words overlap acoustically ("zero"/"oh" share a
//! vowel, "nine"/"five" share "ay"). Digit images are seven-segment glyphs.
//! Background data reuses the phone and stroke inventories with different
//! combinations, and background images are drawn dark-on-light at 56×56 and
//! pass through [`preprocess_background_image`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    preprocess_background_image, Dataset, FrameSequence, ImageGrid, ImageSet, Item, PairLabels,
    SpeechSet, IMAGE_PIXELS, IMAGE_SIDE,
};
use crate::error::{Error, Result};

pub const SPEECH_FRAME_DIM: usize = 13;
pub const BACKGROUND_FRAME_DIM: usize = SPEECH_FRAME_DIM;

/// Spoken digit classes, in label order.
pub const DIGIT_WORDS: [&str; 11] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "zero", "oh",
];

const PHONES: [&str; 20] = [
    "w", "ah", "n", "t", "uw", "th", "r", "iy", "f", "ao", "ay", "v", "s", "ih", "k", "eh", "ax",
    "ey", "z", "ow",
];
const PHONE_SEED: u64 = 0x7068_6f6e_6573;
const PHONE_AMPLITUDE: f64 = 0.6;
const BACKGROUND_SEED: u64 = 0x6267_7264;
const RAW_BACKGROUND_SIDE: usize = 56;

/// (phone, frames) per digit word; word lengths run from 6 to 12 frames.
fn digit_pronunciation(word: &str) -> &'static [(&'static str, usize)] {
    match word {
        "one" => &[("w", 2), ("ah", 3), ("n", 2)],
        "two" => &[("t", 2), ("uw", 4)],
        "three" => &[("th", 2), ("r", 2), ("iy", 4)],
        "four" => &[("f", 2), ("ao", 3), ("r", 3)],
        "five" => &[("f", 2), ("ay", 4), ("v", 3)],
        "six" => &[("s", 3), ("ih", 2), ("k", 2), ("s", 3)],
        "seven" => &[("s", 3), ("eh", 2), ("v", 2), ("ax", 2), ("n", 3)],
        "eight" => &[("ey", 4), ("t", 2)],
        "nine" => &[("n", 2), ("ay", 4), ("n", 3)],
        "zero" => &[("z", 3), ("ih", 2), ("r", 2), ("ow", 4)],
        "oh" => &[("ow", 7)],
        _ => unreachable!("not a digit word: {word}"),
    }
}

fn phone_inventory() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PHONE_SEED);
    (0..PHONES.len())
        .map(|_| {
            (0..SPEECH_FRAME_DIM)
                .map(|_| rng.gen_range(-PHONE_AMPLITUDE..PHONE_AMPLITUDE))
                .collect()
        })
        .collect()
}

fn phone_index(name: &str) -> usize {
    PHONES.iter().position(|p| *p == name).expect("known phone")
}

/// Renders a phone sequence; the first frame of each later phone blends with its predecessor.
fn render_word(phones: &[(usize, usize)], inventory: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut frames = Vec::new();
    for (k, &(p, dur)) in phones.iter().enumerate() {
        for t in 0..dur {
            let frame = if k > 0 && t == 0 {
                let prev = &inventory[phones[k - 1].0];
                inventory[p]
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            } else {
                inventory[p].clone()
            };
            frames.push(frame);
        }
    }
    frames
}

fn noisy_sequence(proto: &[Vec<f64>], noise: f64, rng: &mut ChaCha8Rng) -> FrameSequence {
    let values = proto
        .iter()
        .flatten()
        .map(|&v| {
            let u: f64 = rng.gen();
            (v + noise * (2.0 * u - 1.0)).clamp(-1.0, 1.0) as f32
        })
        .collect();
    FrameSequence::new(SPEECH_FRAME_DIM, values).expect("non-empty prototype")
}

fn noisy_pixels(proto: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    proto
        .iter()
        .map(|&v| {
            let u: f64 = rng.gen();
            (v + noise * (2.0 * u - 1.0)).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Axis-aligned strokes on a 28×28 canvas: (row0, row1, col0, col1), half-open.
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (4, 7, 8, 20),   // a: top
    (4, 15, 17, 20), // b: upper right
    (13, 24, 17, 20), // c: lower right
    (21, 24, 8, 20), // d: bottom
    (13, 24, 8, 11), // e: lower left
    (4, 15, 8, 11),  // f: upper left
    (13, 16, 8, 20), // g: middle
];

const DIGIT_SEGMENTS: [&str; 10] = [
    "abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg",
];

fn paint_rect(canvas: &mut [f64], side: usize, (r0, r1, c0, c1): (usize, usize, usize, usize), value: f64) {
    for r in r0..r1.min(side) {
        for c in c0..c1.min(side) {
            canvas[r * side + c] = value;
        }
    }
}

fn paint_line(canvas: &mut [f64], side: usize, from: (f64, f64), to: (f64, f64), half_width: f64, value: f64) {
    let (r0, c0) = from;
    let (r1, c1) = to;
    let len2 = (r1 - r0).powi(2) + (c1 - c0).powi(2);
    for r in 0..side {
        for c in 0..side {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let t = (((pr - r0) * (r1 - r0) + (pc - c0) * (c1 - c0)) / len2).clamp(0.0, 1.0);
            let d2 = (pr - r0 - t * (r1 - r0)).powi(2) + (pc - c0 - t * (c1 - c0)).powi(2);
            if d2 <= half_width * half_width {
                canvas[r * side + c] = value;
            }
        }
    }
}

fn glyph_pixels(digit: usize) -> Vec<f64> {
    let mut canvas = vec![0.0; IMAGE_PIXELS];
    for s in DIGIT_SEGMENTS[digit].bytes() {
        paint_rect(&mut canvas, IMAGE_SIDE, SEGMENTS[(s - b'a') as usize], 1.0);
    }
    canvas
}

/// Noise-free prototype image of a visual digit class.
pub fn digit_glyph(digit: usize) -> ImageGrid {
    assert!(digit < 10, "visual digit classes are 0-9");
    ImageGrid::new(glyph_pixels(digit).into_iter().map(|p| p as f32).collect())
        .expect("glyph pixels are in range")
}

/// Stroke inventory for background glyphs: the seven segments plus diagonals and bars.
const BACKGROUND_STROKES: usize = 13;

fn paint_background_stroke(canvas: &mut [f64], stroke: usize) {
    let side = RAW_BACKGROUND_SIDE;
    if stroke < 7 {
        let (r0, r1, c0, c1) = SEGMENTS[stroke];
        paint_rect(canvas, side, (2 * r0, 2 * r1, 2 * c0, 2 * c1), 0.0);
        return;
    }
    let (from, to) = match stroke {
        7 => ((8.0, 16.0), (48.0, 40.0)),
        8 => ((8.0, 40.0), (48.0, 16.0)),
        9 => ((8.0, 28.0), (48.0, 28.0)),
        10 => ((18.0, 16.0), (18.0, 40.0)),
        11 => ((38.0, 16.0), (38.0, 40.0)),
        _ => ((28.0, 16.0), (48.0, 28.0)),
    };
    paint_line(canvas, side, from, to, 2.6, 0.0);
}

fn check_counts(n_per_class: usize, noise: f64) -> Result<()> {
    if n_per_class < 1 {
        return Err(Error::Argument("n_per_class must be at least 1".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Argument(format!("noise {noise} must be a finite nonnegative number")));
    }
    Ok(())
}

/// Generates paired-digit data: 11 spoken classes and 10 visual classes,
/// `n_per_class` items each, perturbed by uniform noise of half-width `noise`.
pub fn synth_paired_digits(
    n_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(SpeechSet, ImageSet, PairLabels)> {
    check_counts(n_per_class, noise)?;
    let inventory = phone_inventory();
    let speech_protos: Vec<Vec<Vec<f64>>> = DIGIT_WORDS
        .iter()
        .map(|w| {
            let phones: Vec<(usize, usize)> = digit_pronunciation(w)
                .iter()
                .map(|&(p, d)| (phone_index(p), d))
                .collect();
            render_word(&phones, &inventory)
        })
        .collect();
    let image_protos: Vec<Vec<f64>> = (0..10).map(glyph_pixels).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speech_items = Vec::with_capacity(n_per_class * DIGIT_WORDS.len());
    let mut image_items = Vec::with_capacity(n_per_class * 10);
    for _ in 0..n_per_class {
        for (c, proto) in speech_protos.iter().enumerate() {
            speech_items.push(Item {
                id: format!("a{:05}", speech_items.len()),
                data: noisy_sequence(proto, noise, &mut rng),
                label: Some(c),
            });
        }
        for (d, proto) in image_protos.iter().enumerate() {
            image_items.push(Item {
                id: format!("v{:05}", image_items.len()),
                data: ImageGrid::new(noisy_pixels(proto, noise, &mut rng))?,
                label: Some(d),
            });
        }
    }
    let speech = Dataset::new(
        speech_items,
        DIGIT_WORDS.iter().map(|w| w.to_string()).collect(),
        SPEECH_FRAME_DIM,
    )?;
    let images = Dataset::new(
        image_items,
        (0..10).map(|d| d.to_string()).collect(),
        IMAGE_PIXELS,
    )?;
    let labels = PairLabels::digits().with_items(&speech, &images)?;
    Ok((speech, images, labels))
}

/// Generates labelled background data that shares no class with the digits.
///
/// Speech classes are random 2–4 phone words; image classes are random 3–5
/// stroke combinations that differ from every seven-segment digit.
pub fn synth_background(
    n_classes: usize,
    n_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(SpeechSet, ImageSet)> {
    check_counts(n_per_class, noise)?;
    if !(2..=200).contains(&n_classes) {
        return Err(Error::Argument(format!(
            "background needs between 2 and 200 classes, got {n_classes}"
        )));
    }
    let inventory = phone_inventory();
    let mut design = ChaCha8Rng::seed_from_u64(BACKGROUND_SEED);

    let digit_words: Vec<Vec<(usize, usize)>> = DIGIT_WORDS
        .iter()
        .map(|w| {
            digit_pronunciation(w)
                .iter()
                .map(|&(p, d)| (phone_index(p), d))
                .collect()
        })
        .collect();
    let mut words: Vec<Vec<(usize, usize)>> = Vec::new();
    while words.len() < n_classes {
        let n_phones = design.gen_range(2..=4);
        let word: Vec<(usize, usize)> = (0..n_phones)
            .map(|_| (design.gen_range(0..PHONES.len()), design.gen_range(2..=4)))
            .collect();
        let len: usize = word.iter().map(|p| p.1).sum();
        let phones: Vec<usize> = word.iter().map(|p| p.0).collect();
        let clashes = |other: &Vec<(usize, usize)>| other.iter().map(|p| p.0).eq(phones.iter().copied());
        if (6..=12).contains(&len) && !digit_words.iter().any(clashes) && !words.iter().any(clashes) {
            words.push(word);
        }
    }
    let speech_protos: Vec<Vec<Vec<f64>>> = words.iter().map(|w| render_word(w, &inventory)).collect();

    let digit_sets: Vec<u32> = DIGIT_SEGMENTS
        .iter()
        .map(|s| s.bytes().fold(0u32, |m, b| m | 1 << (b - b'a')))
        .collect();
    let mut glyph_sets: Vec<u32> = Vec::new();
    let strokes: Vec<usize> = (0..BACKGROUND_STROKES).collect();
    while glyph_sets.len() < n_classes {
        let k = design.gen_range(3..=5);
        let mask = strokes
            .choose_multiple(&mut design, k)
            .fold(0u32, |m, &s| m | 1 << s);
        if !digit_sets.contains(&mask) && !glyph_sets.contains(&mask) {
            glyph_sets.push(mask);
        }
    }
    let raw_protos: Vec<Vec<f64>> = glyph_sets
        .iter()
        .map(|&mask| {
            let mut canvas = vec![1.0; RAW_BACKGROUND_SIDE * RAW_BACKGROUND_SIDE];
            for s in 0..BACKGROUND_STROKES {
                if mask & (1 << s) != 0 {
                    paint_background_stroke(&mut canvas, s);
                }
            }
            canvas
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speech_items = Vec::new();
    let mut image_items = Vec::new();
    for _ in 0..n_per_class {
        for c in 0..n_classes {
            speech_items.push(Item {
                id: format!("ba{:05}", speech_items.len()),
                data: noisy_sequence(&speech_protos[c], noise, &mut rng),
                label: Some(c),
            });
            let raw = noisy_pixels(&raw_protos[c], noise, &mut rng);
            image_items.push(Item {
                id: format!("bv{:05}", image_items.len()),
                data: preprocess_background_image(&raw, RAW_BACKGROUND_SIDE)?,
                label: Some(c),
            });
        }
    }
    let speech = Dataset::new(
        speech_items,
        (0..n_classes).map(|c| format!("bgword{c:03}")).collect(),
        BACKGROUND_FRAME_DIM,
    )?;
    let images = Dataset::new(
        image_items,
        (0..n_classes).map(|c| format!("bgglyph{c:03}")).collect(),
        IMAGE_PIXELS,
    )?;
    Ok((speech, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{cosine_distance, dtw_distance, pixel_distance};

    #[test]
    fn zero_noise_items_equal_prototypes() {
        let (speech, images, _) = synth_paired_digits(3, 0.0, 1).unwrap();
        for class in speech.positions_by_label() {
            for &i in &class[1..] {
                assert_eq!(speech.data(i), speech.data(class[0]));
            }
        }
        for (d, class) in images.positions_by_label().iter().enumerate() {
            for &i in class {
                assert_eq!(images.data(i), &digit_glyph(d));
            }
        }
    }

    #[test]
    fn counts_per_class() {
        let (speech, images, labels) = synth_paired_digits(5, 0.3, 2).unwrap();
        assert_eq!(speech.len(), 55);
        assert_eq!(images.len(), 50);
        assert_eq!(labels.speech_to_class.len(), 55);
        assert_eq!(labels.image_to_class.len(), 50);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = synth_paired_digits(4, 0.4, 9).unwrap();
        let b = synth_paired_digits(4, 0.4, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_paired_digits(4, 0.4, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn negative_noise_is_rejected() {
        assert!(matches!(synth_paired_digits(2, -0.1, 0), Err(Error::Argument(_))));
        assert!(matches!(synth_paired_digits(0, 0.1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn word_lengths_are_class_dependent_and_bounded() {
        let (speech, _, _) = synth_paired_digits(1, 0.0, 0).unwrap();
        for item in speech.items() {
            assert!((6..=12).contains(&item.data.len()), "{}", item.data.len());
        }
    }

    #[test]
    fn zero_noise_prototypes_are_separated() {
        let (speech, images, _) = synth_paired_digits(1, 0.0, 0).unwrap();
        for i in 0..images.len() {
            for j in 0..images.len() {
                let d = pixel_distance(images.data(i), images.data(j)).unwrap();
                if i == j {
                    assert_eq!(d, 0.0);
                } else {
                    assert!(d > 0.0);
                }
            }
        }
        for i in 0..speech.len() {
            for j in 0..speech.len() {
                let d = dtw_distance(speech.data(i), speech.data(j)).unwrap();
                assert_eq!(d == 0.0, i == j, "{} vs {}", i, j);
                if speech.data(i).len() == speech.data(j).len() {
                    let c = cosine_distance(&speech.data(i).to_f64(), &speech.data(j).to_f64()).unwrap();
                    assert_eq!(c.abs() < 1e-12, i == j);
                }
            }
        }
    }

    #[test]
    fn background_avoids_digit_classes() {
        let (speech, images) = synth_background(12, 2, 0.2, 4).unwrap();
        assert_eq!(speech.len(), 24);
        assert_eq!(images.len(), 24);
        assert!(speech.classes().iter().all(|c| !DIGIT_WORDS.contains(&c.as_str())));
        let digit_protos: Vec<ImageGrid> = (0..10).map(digit_glyph).collect();
        let (_, clean) = synth_background(12, 1, 0.0, 4).unwrap();
        for item in clean.items() {
            assert!(digit_protos.iter().all(|g| g != &item.data));
            assert!(item.data.pixels().iter().any(|&p| p > 0.5));
        }
    }
}
