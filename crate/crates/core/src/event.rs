//! Event data model: timestamped polarity spikes, the standard voxel-grid
//! representation, stream reversal/splitting, and a deterministic
//! frame-pair event simulator used for tests and toy training.

use crate::error::{Error, Result};
use crate::flow::Frame;
use crate::tensor::Tensor;

/// One brightness-change spike. Polarity is +1 or -1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

/// Events sorted non-decreasing by timestamp over a closed window.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub t_start: u64,
    pub t_end: u64,
}

fn canonical_sort(events: &mut [Event]) {
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
}

impl EventStream {
    /// Build a stream; events are sorted canonically and validated against
    /// the geometry and window.
    pub fn new(
        mut events: Vec<Event>,
        width: u16,
        height: u16,
        t_start: u64,
        t_end: u64,
    ) -> Result<EventStream> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("event_stream", "geometry must be positive"));
        }
        if t_end < t_start {
            return Err(Error::invalid("event_stream", format!("window [{t_start}, {t_end}] is empty")));
        }
        for e in &events {
            if e.p != 1 && e.p != -1 {
                return Err(Error::invalid("event_stream", format!("polarity {} not in {{-1, +1}}", e.p)));
            }
            if e.x >= width || e.y >= height {
                return Err(Error::invalid(
                    "event_stream",
                    format!("event at ({}, {}) outside {width}x{height}", e.x, e.y),
                ));
            }
            if e.t < t_start || e.t > t_end {
                return Err(Error::invalid(
                    "event_stream",
                    format!("event at t={} outside [{t_start}, {t_end}]", e.t),
                ));
            }
        }
        canonical_sort(&mut events);
        Ok(EventStream { events, width, height, t_start, t_end })
    }

    pub fn empty(width: u16, height: u16, t_start: u64, t_end: u64) -> EventStream {
        EventStream { events: Vec::new(), width, height, t_start, t_end }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// B x H x W signed bilinear accumulation of an event stream over temporal
/// bins.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl VoxelGrid {
    /// View as 1 x B x H x W network input.
    pub fn as_input(&self) -> Tensor {
        self.data.view(vec![1, self.bins, self.height, self.width])
    }

    /// Total absolute deposited mass; equals the event count for streams
    /// whose events all fall inside the window.
    pub fn l1_mass(&self) -> f64 {
        self.data.data().iter().map(|v| v.abs()).sum()
    }
}

/// Accumulate events into temporal bins: an event at normalized time
/// `t* = (bins-1)(t - t0)/(t1 - t0)` deposits `p * max(0, 1 - |b - t*|)`
/// into each bin `b`.
pub fn voxelize(
    stream: &EventStream,
    t0: u64,
    t1: u64,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<VoxelGrid> {
    if t1 <= t0 {
        return Err(Error::invalid("voxelize", format!("window [{t0}, {t1}] is empty")));
    }
    if bins < 2 {
        return Err(Error::invalid("voxelize", format!("bins {bins} < 2")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("voxelize", "geometry must be positive"));
    }
    let mut data = vec![0.0f64; bins * height * width];
    let span = (t1 - t0) as f64;
    for e in stream.events() {
        if e.t < t0 || e.t > t1 {
            return Err(Error::invalid("voxelize", format!("event at t={} outside [{t0}, {t1}]", e.t)));
        }
        if (e.x as usize) >= width || (e.y as usize) >= height {
            return Err(Error::invalid(
                "voxelize",
                format!("event at ({}, {}) outside {width}x{height}", e.x, e.y),
            ));
        }
        let tstar = (bins - 1) as f64 * (e.t - t0) as f64 / span;
        let b0 = tstar.floor() as usize;
        let frac = tstar - b0 as f64;
        let pixel = e.y as usize * width + e.x as usize;
        data[b0 * height * width + pixel] += e.p as f64 * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            data[(b0 + 1) * height * width + pixel] += e.p as f64 * frac;
        }
    }
    Ok(VoxelGrid {
        bins,
        height,
        width,
        data: Tensor::from_vec(vec![bins, height, width], data),
    })
}

/// Reflect a stream in time and flip polarities: `(t, x, y, p)` becomes
/// `(t0 + t1 - t, x, y, -p)` over the same window. Applying it twice gives
/// back the original stream.
pub fn reverse_events(stream: &EventStream) -> EventStream {
    let (t0, t1) = (stream.t_start, stream.t_end);
    let mut events: Vec<Event> = stream
        .events()
        .iter()
        .map(|e| Event { t: t0 + (t1 - e.t), x: e.x, y: e.y, p: -e.p })
        .collect();
    canonical_sort(&mut events);
    EventStream { events, width: stream.width, height: stream.height, t_start: t0, t_end: t1 }
}

/// Partition at time `t`: the left stream holds events strictly before `t`
/// over `[t_start, t]`, the right stream holds the rest over `[t, t_end]`.
pub fn split_events(stream: &EventStream, t: u64) -> Result<(EventStream, EventStream)> {
    if t < stream.t_start || t > stream.t_end {
        return Err(Error::invalid(
            "split_events",
            format!("t={t} outside [{}, {}]", stream.t_start, stream.t_end),
        ));
    }
    let pivot = stream.events.partition_point(|e| e.t < t);
    let left = EventStream {
        events: stream.events[..pivot].to_vec(),
        width: stream.width,
        height: stream.height,
        t_start: stream.t_start,
        t_end: t,
    };
    let right = EventStream {
        events: stream.events[pivot..].to_vec(),
        width: stream.width,
        height: stream.height,
        t_start: t,
        t_end: stream.t_end,
    };
    Ok((left, right))
}

/// Per-pixel log-luminance threshold crossing between two frames: a pixel
/// whose log-luminance changes by `delta` emits `floor(|delta| / c)` events
/// of `sign(delta)`. Timestamps are the crossing times of the linearly
/// interpolated log-luminance, i.e. equally spaced with step
/// `span * c / |delta|` inside `(t_a, t_b]`.
pub fn simulate_events(
    frame_a: &Frame,
    frame_b: &Frame,
    t_a: u64,
    t_b: u64,
    contrast_threshold: f64,
) -> Result<EventStream> {
    simulate_sequence_events(
        &[frame_a.clone(), frame_b.clone()],
        &[t_a, t_b],
        contrast_threshold,
    )
}

/// Threshold-crossing simulation over a whole frame sequence: each pixel
/// keeps a log-luminance reference that advances by the contrast threshold
/// per emitted event, so residual change carries across frames and event
/// timestamps cluster where the brightness actually moved. Two frames
/// reduce to the plain pairwise rule.
pub fn simulate_sequence_events(
    frames: &[Frame],
    timestamps: &[u64],
    contrast_threshold: f64,
) -> Result<EventStream> {
    if frames.len() < 2 || frames.len() != timestamps.len() {
        return Err(Error::invalid(
            "simulate_events",
            format!("{} frames vs {} timestamps", frames.len(), timestamps.len()),
        ));
    }
    let first = &frames[0];
    let (h, w) = (first.height(), first.width());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::invalid("simulate_events", "frame too large for event coordinates"));
    }
    if !(contrast_threshold > 0.0) {
        return Err(Error::invalid("simulate_events", "contrast threshold must be > 0"));
    }
    for (f, pair) in frames.iter().zip(timestamps.windows(2)) {
        if f.height() != h || f.width() != w || f.channels() != first.channels() {
            return Err(Error::shape(
                "simulate_events",
                format!("frame geometry {}x{} vs {h}x{w}", f.height(), f.width()),
            ));
        }
        if pair[1] <= pair[0] {
            return Err(Error::invalid(
                "simulate_events",
                format!("timestamps not increasing: {} -> {}", pair[0], pair[1]),
            ));
        }
    }
    const EPS: f64 = 1e-3;
    let log_lum = |f: &Frame, y: usize, x: usize| (f.luminance(y, x) + EPS).ln();
    let mut refs: Vec<f64> = (0..h * w).map(|i| log_lum(first, i / w, i % w)).collect();
    let mut events = Vec::new();
    for k in 0..frames.len() - 1 {
        let (t_a, t_b) = (timestamps[k], timestamps[k + 1]);
        let span = t_b - t_a;
        let next = &frames[k + 1];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let start = log_lum(&frames[k], y, x);
                let target = log_lum(next, y, x);
                let delta = target - start;
                // crossings of the reference ladder along the linear ramp
                let total = target - refs[pix];
                let count = (total.abs() / contrast_threshold).floor() as u64;
                if count == 0 {
                    continue;
                }
                let p: i8 = if total > 0.0 { 1 } else { -1 };
                for i in 1..=count {
                    let level = refs[pix] + p as f64 * i as f64 * contrast_threshold;
                    // time at which the ramp from start to target reaches
                    // the level; changes against the ramp collapse to t_a
                    let frac = if delta.abs() > 1e-12 {
                        ((level - start) / delta).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let offset = ((span as f64 * frac).round() as u64).clamp(1, span);
                    events.push(Event { t: t_a + offset, x: x as u16, y: y as u16, p });
                }
                refs[pix] += p as f64 * count as f64 * contrast_threshold;
            }
        }
    }
    canonical_sort(&mut events);
    Ok(EventStream {
        events,
        width: w as u16,
        height: h as u16,
        t_start: timestamps[0],
        t_end: timestamps[timestamps.len() - 1],
    })
}
