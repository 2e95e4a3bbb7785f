//! A hand sprite acting on glyph objects: object×action (level 1, with a
//! distractor glyph) and object×action×modifier (level 2).

use std::f64::consts::PI;

use super::canvas::{Canvas, Rgb};
use super::{Dataset, HeadInfo, SynthSpec, Task, VideoSample};
use crate::error::Result;
use crate::tensor::SeededRng;

pub const OBJECTS: [&str; 4] = ["box", "ball", "cone", "cross"];
const OBJECT_COLORS: [Rgb; 4] = [[220, 60, 60], [60, 200, 80], [70, 110, 230], [230, 200, 50]];

pub const LEVEL1_ACTIONS: [&str; 9] = [
    "push-left",
    "push-right",
    "lift",
    "press",
    "circle",
    "shake",
    "pull-down",
    "tap",
    "toss",
];

/// Valid (object, action) pairs of level 1.
pub const LEVEL1_PAIRS: [(usize, usize); 15] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 0),
    (1, 4),
    (1, 5),
    (1, 8),
    (2, 2),
    (2, 7),
    (2, 6),
    (2, 5),
    (3, 3),
    (3, 4),
    (3, 7),
];

pub const LEVEL2_ACTIONS: [&str; 4] = ["push", "lift", "squeeze", "shake"];
pub const MODIFIERS: [&str; 6] = ["once", "twice", "thrice", "slow", "medium", "fast"];

/// Valid (object, action, modifier) triplets of level 2. Every object and
/// every action pairs with each modifier at most twice.
pub const LEVEL2_TRIPLETS: [(usize, usize, usize); 42] = [
    (0, 0, 2),
    (0, 0, 5),
    (0, 1, 0),
    (0, 1, 1),
    (0, 1, 2),
    (0, 1, 3),
    (0, 2, 3),
    (0, 2, 5),
    (0, 3, 0),
    (0, 3, 1),
    (0, 3, 4),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 2),
    (1, 1, 3),
    (1, 1, 5),
    (1, 2, 0),
    (1, 2, 3),
    (1, 2, 4),
    (1, 2, 5),
    (1, 3, 2),
    (1, 3, 4),
    (2, 0, 3),
    (2, 0, 4),
    (2, 0, 5),
    (2, 1, 1),
    (2, 1, 4),
    (2, 2, 0),
    (2, 2, 1),
    (2, 2, 2),
    (2, 3, 3),
    (2, 3, 5),
    (3, 0, 0),
    (3, 0, 1),
    (3, 0, 2),
    (3, 0, 4),
    (3, 1, 4),
    (3, 1, 5),
    (3, 2, 1),
    (3, 3, 0),
    (3, 3, 2),
    (3, 3, 3),
];

struct Style {
    unit: f64,
    hand: Rgb,
    background: Rgb,
    rest_dx: f64,
}

fn subject_style(spec: &SynthSpec, rng: &mut SeededRng) -> Style {
    Style {
        unit: spec.height.min(spec.width) as f64 / 24.0 * rng.uniform(0.9, 1.1),
        hand: [
            rng.inclusive(200, 255) as u8,
            rng.inclusive(150, 200) as u8,
            rng.inclusive(120, 170) as u8,
        ],
        background: [
            rng.inclusive(0, 40) as u8,
            rng.inclusive(0, 40) as u8,
            rng.inclusive(0, 40) as u8,
        ],
        rest_dx: rng.uniform(-3.0, 3.0),
    }
}

#[derive(Clone, Copy, Debug)]
struct Glyph {
    kind: usize,
    y: f64,
    x: f64,
    filled: bool,
    /// Size multiplier (squeezing shrinks it).
    size: f64,
}

fn draw_glyph(canvas: &mut Canvas, g: &Glyph, unit: f64) {
    let r = 2.5 * unit * g.size;
    let c = OBJECT_COLORS[g.kind];
    match g.kind {
        0 => {
            if g.filled {
                canvas.rect(g.y - r, g.x - r, g.y + r, g.x + r, c);
            } else {
                canvas.rect(g.y - r, g.x - r, g.y + r, g.x - r + 1.0, c);
                canvas.rect(g.y - r, g.x + r - 1.0, g.y + r, g.x + r, c);
                canvas.rect(g.y - r, g.x - r, g.y - r + 1.0, g.x + r, c);
                canvas.rect(g.y + r - 1.0, g.x - r, g.y + r, g.x + r, c);
            }
        }
        1 => {
            if g.filled {
                canvas.disc(g.y, g.x, r, c);
            } else {
                canvas.ring(g.y, g.x, r, 1.0, c);
            }
        }
        2 => canvas.triangle(g.y, g.x, r, g.filled, c),
        _ => {
            let t = if g.filled { 2.0 } else { 1.0 };
            canvas.line((g.y - r, g.x), (g.y + r, g.x), t, c);
            canvas.line((g.y, g.x - r), (g.y, g.x + r), t, c);
        }
    }
}

fn draw_hand(canvas: &mut Canvas, y: f64, x: f64, style: &Style) {
    canvas.disc(y, x, 1.6 * style.unit, style.hand);
}

fn lerp(a: (f64, f64), b: (f64, f64), v: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * v, a.1 + (b.1 - a.1) * v)
}

fn clamp_point(p: (f64, f64), h: usize, w: usize) -> (f64, f64) {
    (p.0.clamp(2.0, h as f64 - 2.0), p.1.clamp(2.0, w as f64 - 2.0))
}

/// Hand offset from the object and object displacement during a level-1
/// action, for `v` in [0, 1].
fn level1_motion(action: usize, v: f64, u: f64) -> ((f64, f64), (f64, f64)) {
    let (hand, obj) = match action {
        0 => ((0.0, 3.5), (0.0, -5.0 * v)),
        1 => ((0.0, -3.5), (0.0, 5.0 * v)),
        2 => ((3.5, 0.0), (-5.0 * v, 0.0)),
        3 => ((-3.5 + 1.5 * (2.0 * PI * v).sin().abs(), 0.0), (0.0, 0.0)),
        4 => ((-4.0 * (2.0 * PI * v).cos(), 4.0 * (2.0 * PI * v).sin()), (0.0, 0.0)),
        5 => ((0.0, 3.5), (0.0, 2.0 * (4.0 * PI * v).sin())),
        6 => ((-3.5, 0.0), (4.0 * v, 0.0)),
        7 => ((-3.5 - 2.0 * (3.0 * PI * v).sin().abs(), 0.0), (0.0, 0.0)),
        _ => ((2.0, -3.5), (-6.0 * (PI * v).sin(), 6.0 * v)),
    };
    ((hand.0 * u, hand.1 * u), (obj.0 * u, obj.1 * u))
}

fn place_objects(
    rng: &mut SeededRng,
    h: usize,
    w: usize,
    u: f64,
    second: bool,
) -> ((f64, f64), Option<(f64, f64)>) {
    let (hf, wf) = (h as f64, w as f64);
    let ado = (rng.uniform(0.3 * hf, 0.55 * hf), rng.uniform(0.3 * wf, 0.7 * wf));
    if !second {
        return (ado, None);
    }
    loop {
        let p = (rng.uniform(4.0 * u, hf - 4.0 * u), rng.uniform(4.0 * u, wf - 4.0 * u));
        if ((p.0 - ado.0).powi(2) + (p.1 - ado.1).powi(2)).sqrt() >= 8.0 * u {
            return (ado, Some(p));
        }
    }
}

pub fn generate_level1(spec: &SynthSpec, rng: &mut SeededRng) -> Result<Dataset> {
    spec.validate_for(Task::Level1)?;
    let (h, w) = (spec.height, spec.width);
    let n = spec.video_frames();
    let mut samples = Vec::new();
    for subject in 0..spec.subjects {
        let mut srng = rng.fork(subject as u64);
        let style = subject_style(spec, &mut srng);
        let u = style.unit;
        let rest = (h as f64 - 2.5 * u, w as f64 / 2.0 + style.rest_dx);
        for &(object, action) in &LEVEL1_PAIRS {
            for _ in 0..spec.repeats() {
                let (ado_at, other_at) = place_objects(&mut srng, h, w, u, true);
                let others: Vec<usize> = (0..4).filter(|&k| k != object).collect();
                let distractor = Glyph {
                    kind: others[srng.below(3)],
                    y: other_at.unwrap().0,
                    x: other_at.unwrap().1,
                    filled: srng.bernoulli(0.5),
                    size: 1.0,
                };
                let filled = srng.bernoulli(0.5);
                let (contact, _) = level1_motion(action, 0.0, u);
                let mut frames = Vec::with_capacity(n);
                for k in 0..n {
                    let s = k as f64 / (n - 1) as f64;
                    let (hand_rel, disp) = level1_motion(action, ((s - 0.3) / 0.55).clamp(0.0, 1.0), u);
                    let obj = clamp_point((ado_at.0 + disp.0, ado_at.1 + disp.1), h, w);
                    let at_object = (obj.0 + hand_rel.0, obj.1 + hand_rel.1);
                    let hand = if s < 0.3 {
                        lerp(rest, (ado_at.0 + contact.0, ado_at.1 + contact.1), s / 0.3)
                    } else if s <= 0.85 {
                        at_object
                    } else {
                        lerp(at_object, rest, (s - 0.85) / 0.15)
                    };
                    let hand = clamp_point(hand, h, w);
                    let mut canvas = Canvas::filled(h, w, style.background);
                    draw_glyph(&mut canvas, &distractor, u);
                    let g = Glyph {
                        kind: object,
                        y: obj.0,
                        x: obj.1,
                        filled,
                        size: 1.0,
                    };
                    draw_glyph(&mut canvas, &g, u);
                    draw_hand(&mut canvas, hand.0, hand.1, &style);
                    frames.push(canvas.to_tensor());
                }
                samples.push(VideoSample {
                    id: format!("sample_{:04}", samples.len()),
                    subject,
                    frames,
                    labels: vec![object, action],
                    contacts: Vec::new(),
                });
            }
        }
    }
    Ok(Dataset {
        task: Task::Level1,
        heads: vec![
            HeadInfo::new("object", &OBJECTS),
            HeadInfo::new("action", &LEVEL1_ACTIONS),
        ],
        samples,
    })
}

/// Event windows `(start, length)` of a modifier inside the action phase.
pub fn modifier_events(modifier: usize, start: usize, active: usize) -> Vec<(usize, usize)> {
    let len = |f: f64| ((active as f64 * f).round() as usize).max(3);
    match modifier {
        0..=2 => {
            let l = len(0.3);
            (0..=modifier).map(|i| (start + i * l, l)).collect()
        }
        3 => vec![(start, active)],
        4 => vec![(start, len(0.6))],
        _ => vec![(start, len(0.2))],
    }
}

/// Event phase boundaries: approach, contact, return.
const CONTACT_FROM: f64 = 0.25;
const CONTACT_TO: f64 = 0.75;

fn event_phase(k: usize, len: usize) -> f64 {
    (k as f64 + 0.5) / len as f64
}

fn level2_manipulation(action: usize, v: f64, u: f64) -> ((f64, f64), f64) {
    let bump = (PI * v).sin();
    match action {
        0 => ((0.0, 4.0 * u * bump), 1.0),
        1 => ((-4.0 * u * bump, 0.0), 1.0),
        2 => ((0.0, 0.0), 1.0 - 0.5 * bump),
        _ => ((0.0, 2.5 * u * (4.0 * PI * v).sin()), 1.0),
    }
}

pub fn generate_level2(spec: &SynthSpec, rng: &mut SeededRng) -> Result<Dataset> {
    spec.validate_for(Task::Level2)?;
    let (h, w) = (spec.height, spec.width);
    let n = spec.video_frames();
    let prep = n / 3;
    let mut samples = Vec::new();
    for subject in 0..spec.subjects {
        let mut srng = rng.fork(subject as u64);
        let style = subject_style(spec, &mut srng);
        let u = style.unit;
        let rest = (h as f64 - 2.5 * u, w as f64 / 2.0 + style.rest_dx);
        // Each subject works at one spot of its table.
        let (anchor, _) = place_objects(&mut srng, h, w, u, false);
        for &(object, action, modifier) in &LEVEL2_TRIPLETS {
            for _ in 0..spec.repeats() {
                let at = (anchor.0 + srng.uniform(-u, u), anchor.1 + srng.uniform(-u, u));
                let filled = srng.bernoulli(0.5);
                let contact_point = (at.0 + 3.0 * u, at.1);
                let events = modifier_events(modifier, prep, n - prep);
                let mut contacts = Vec::new();
                let mut frames = Vec::with_capacity(n);
                for t in 0..n {
                    let mut hand = rest;
                    let mut obj = at;
                    let mut size = 1.0;
                    if let Some(&(start, len)) = events.iter().find(|(s, l)| t >= *s && t < s + l) {
                        let v = event_phase(t - start, len);
                        if v < CONTACT_FROM {
                            hand = lerp(rest, contact_point, v / CONTACT_FROM);
                        } else if v <= CONTACT_TO {
                            let m = (v - CONTACT_FROM) / (CONTACT_TO - CONTACT_FROM);
                            let (d, s) = level2_manipulation(action, m, u);
                            obj = (at.0 + d.0, at.1 + d.1);
                            size = s;
                            hand = (contact_point.0 + d.0, contact_point.1 + d.1);
                            let first = (0..len).find(|&k| event_phase(k, len) >= CONTACT_FROM);
                            if first == Some(t - start) {
                                contacts.push(t);
                            }
                        } else {
                            hand = lerp(contact_point, rest, (v - CONTACT_TO) / (1.0 - CONTACT_TO));
                        }
                    }
                    let mut canvas = Canvas::filled(h, w, style.background);
                    let g = Glyph {
                        kind: object,
                        y: obj.0,
                        x: obj.1,
                        filled,
                        size,
                    };
                    draw_glyph(&mut canvas, &g, u);
                    let hand = clamp_point(hand, h, w);
                    draw_hand(&mut canvas, hand.0, hand.1, &style);
                    frames.push(canvas.to_tensor());
                }
                samples.push(VideoSample {
                    id: format!("sample_{:04}", samples.len()),
                    subject,
                    frames,
                    labels: vec![object, action, modifier],
                    contacts,
                });
            }
        }
    }
    Ok(Dataset {
        task: Task::Level2,
        heads: vec![
            HeadInfo::new("object", &OBJECTS),
            HeadInfo::new("action", &LEVEL2_ACTIONS),
            HeadInfo::new("modifier", &MODIFIERS),
        ],
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn level1_table_covers_every_action() {
        let pairs: HashSet<_> = LEVEL1_PAIRS.iter().collect();
        assert_eq!(pairs.len(), 15);
        for a in 0..9 {
            assert!(LEVEL1_PAIRS.iter().any(|&(_, x)| x == a));
        }
    }

    #[test]
    fn level2_table_is_balanced() {
        let set: HashSet<_> = LEVEL2_TRIPLETS.iter().collect();
        assert_eq!(set.len(), 42);
        for m in 0..6 {
            assert_eq!(LEVEL2_TRIPLETS.iter().filter(|t| t.2 == m).count(), 7);
            for o in 0..4 {
                let n = LEVEL2_TRIPLETS.iter().filter(|t| t.0 == o && t.2 == m).count();
                assert!(n <= 2);
            }
        }
    }

    #[test]
    fn repetition_events_fill_disjoint_windows() {
        let ev = modifier_events(2, 10, 20);
        assert_eq!(ev, vec![(10, 6), (16, 6), (22, 6)]);
        assert_eq!(modifier_events(3, 10, 20), vec![(10, 20)]);
        assert_eq!(modifier_events(4, 10, 20), vec![(10, 12)]);
        assert_eq!(modifier_events(5, 10, 20), vec![(10, 4)]);
    }
}
