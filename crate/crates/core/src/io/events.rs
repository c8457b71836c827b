//! EVT1 binary event files and the CSV alternative.

use super::ByteReader;
use crate::error::{Error, Result};
use crate::event::{Event, EventStream};

const MAGIC: &[u8] = b"EVT1";

/// magic "EVT1", u16 width, u16 height, u64 t_start, u64 t_end, u64 count,
/// then per event {u64 t, u16 x, u16 y, i8 p, i8 pad=0}, little-endian.
pub fn write_evt1(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 14 * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&stream.t_start.to_le_bytes());
    out.extend_from_slice(&stream.t_end.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
        out.push(0);
    }
    out
}

pub fn read_evt1(bytes: &[u8]) -> Result<EventStream> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let width = r.u16()?;
    let height = r.u16()?;
    let t_start = r.u64()?;
    let t_end = r.u64()?;
    let count = r.u64()?;
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let t = r.u64()?;
        let x = r.u16()?;
        let y = r.u16()?;
        let p = r.i8()?;
        let at = r.offset();
        let pad = r.i8()?;
        if pad != 0 {
            return Err(Error::format(format!("nonzero pad byte {pad}"), Some(at)));
        }
        events.push(Event { t, x, y, p });
    }
    r.done()?;
    EventStream::new(events, width, height, t_start, t_end)
}

/// CSV with a `t_us,x,y,p` header; geometry and window are carried in
/// leading `#` comment lines so the round trip is lossless.
pub fn write_events_csv(stream: &EventStream) -> String {
    let mut out = String::new();
    out.push_str(&format!("# width={} height={}\n", stream.width, stream.height));
    out.push_str(&format!("# t_start={} t_end={}\n", stream.t_start, stream.t_end));
    out.push_str("t_us,x,y,p\n");
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    out
}

pub fn read_events_csv(text: &str) -> Result<EventStream> {
    let mut width: Option<u16> = None;
    let mut height: Option<u16> = None;
    let mut t_start: Option<u64> = None;
    let mut t_end: Option<u64> = None;
    let mut saw_header = false;
    let mut events = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            for part in comment.split_whitespace() {
                if let Some((key, value)) = part.split_once('=') {
                    match key {
                        "width" => width = value.parse().ok(),
                        "height" => height = value.parse().ok(),
                        "t_start" => t_start = value.parse().ok(),
                        "t_end" => t_end = value.parse().ok(),
                        _ => {}
                    }
                }
            }
            continue;
        }
        if !saw_header {
            if line != "t_us,x,y,p" {
                return Err(Error::format(
                    format!("line {}: expected header t_us,x,y,p, got {line:?}", lineno + 1),
                    None,
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!("line {}: expected 4 fields", lineno + 1), None));
        }
        let parse = |s: &str, what: &str| -> Result<i64> {
            s.trim()
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad {what} {s:?}", lineno + 1), None))
        };
        events.push(Event {
            t: parse(fields[0], "timestamp")? as u64,
            x: parse(fields[1], "x")? as u16,
            y: parse(fields[2], "y")? as u16,
            p: parse(fields[3], "polarity")? as i8,
        });
    }
    if !saw_header {
        return Err(Error::format("missing t_us,x,y,p header", None));
    }
    let t_lo = events.iter().map(|e| e.t).min().unwrap_or(0);
    let t_hi = events.iter().map(|e| e.t).max().unwrap_or(0);
    let w = width.unwrap_or_else(|| events.iter().map(|e| e.x + 1).max().unwrap_or(1));
    let h = height.unwrap_or_else(|| events.iter().map(|e| e.y + 1).max().unwrap_or(1));
    EventStream::new(events, w, h, t_start.unwrap_or(t_lo), t_end.unwrap_or(t_hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_stream(n: usize, seed: u64) -> EventStream {
        let mut rng = Rng::new(seed);
        let events = (0..n)
            .map(|_| Event {
                t: 100 + rng.next_u64() % 9000,
                x: rng.below(64) as u16,
                y: rng.below(48) as u16,
                p: if rng.unit() < 0.5 { 1 } else { -1 },
            })
            .collect();
        EventStream::new(events, 64, 48, 100, 9100).unwrap()
    }

    #[test]
    fn evt1_bitwise_roundtrip() {
        let s = sample_stream(500, 3);
        let bytes = write_evt1(&s);
        let back = read_evt1(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(write_evt1(&back), bytes);
    }

    #[test]
    fn evt1_empty_stream_roundtrips() {
        let s = EventStream::empty(16, 16, 0, 1000);
        let back = read_evt1(&write_evt1(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn evt1_truncation_names_byte_counts() {
        let s = sample_stream(10, 4);
        let bytes = write_evt1(&s);
        let err = read_evt1(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("available"), "{msg}");
    }

    #[test]
    fn evt1_rejects_bad_magic() {
        let s = sample_stream(1, 5);
        let mut bytes = write_evt1(&s);
        bytes[0] = b'X';
        let err = read_evt1(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn csv_roundtrip() {
        let s = sample_stream(100, 6);
        let text = write_events_csv(&s);
        assert!(text.contains("t_us,x,y,p\n"));
        let back = read_events_csv(&text).unwrap();
        assert_eq!(back, s);
    }
}
