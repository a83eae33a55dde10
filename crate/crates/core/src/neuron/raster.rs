//! Binary spike rasters and their on-disk encodings.
//!
//! Two formats are supported:
//! * text: a header line `SNNRASTER v1 <T> <n>` followed by one
//!   `t neuron_id` pair per line (ASCII, 0-indexed);
//! * dense binary: 16-byte header (magic `SNNR`, little-endian u32 `T`,
//!   u32 `n`, u32 flags) followed by the row-major bit-packed `T x n` grid.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense binary spike raster, `t_len` rows by `n` input channels. Entries
/// are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRaster {
    pub t_len: usize,
    pub n: usize,
    pub data: Array2<f64>,
}

impl SpikeRaster {
    pub fn zeros(t_len: usize, n: usize) -> Self {
        SpikeRaster {
            t_len,
            n,
            data: Array2::zeros((t_len, n)),
        }
    }

    /// Build from `(t, neuron)` event pairs.
    pub fn from_events(t_len: usize, n: usize, events: &[(usize, usize)]) -> Result<Self> {
        let mut r = SpikeRaster::zeros(t_len, n);
        for &(t, i) in events {
            if t >= t_len || i >= n {
                return Err(Error::Domain(format!(
                    "event ({t}, {i}) outside raster bounds ({t_len}, {n})"
                )));
            }
            r.data[[t, i]] = 1.0;
        }
        Ok(r)
    }

    /// Sorted `(t, neuron)` event list.
    pub fn events(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.t_len {
            for i in 0..self.n {
                if self.data[[t, i]] != 0.0 {
                    out.push((t, i));
                }
            }
        }
        out
    }

    pub fn count_events(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Encode in the `SNNRASTER v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("SNNRASTER v1 {} {}\n", self.t_len, self.n);
        for (t, i) in self.events() {
            out.push_str(&format!("{t} {i}\n"));
        }
        out
    }

    /// Decode the `SNNRASTER v1` text format; unknown major versions are
    /// rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty raster file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "SNNRASTER" {
            return Err(Error::Format(format!("bad raster header: {header:?}")));
        }
        if fields[1] != "v1" {
            return Err(Error::Format(format!(
                "unsupported raster version {:?}",
                fields[1]
            )));
        }
        let t_len: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad T field {:?}", fields[2])))?;
        let n: usize = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad n field {:?}", fields[3])))?;
        let mut events = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let t: usize = it
                .next()
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format(format!("line {}: bad event", lineno + 2)))?;
            let i: usize = it
                .next()
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format(format!("line {}: bad event", lineno + 2)))?;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "line {}: trailing fields",
                    lineno + 2
                )));
            }
            events.push((t, i));
        }
        SpikeRaster::from_events(t_len, n, &events)
            .map_err(|e| Error::Format(format!("event outside bounds: {e}")))
    }

    /// Encode in the dense bit-packed binary format.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + (self.t_len * self.n + 7) / 8);
        out.extend_from_slice(b"SNNR");
        out.extend_from_slice(&(self.t_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        let bits = self.t_len * self.n;
        let mut bytes = vec![0u8; (bits + 7) / 8];
        for t in 0..self.t_len {
            for i in 0..self.n {
                if self.data[[t, i]] != 0.0 {
                    let bit = t * self.n + i;
                    bytes[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        out.extend_from_slice(&bytes);
        out
    }

    /// Decode the dense bit-packed binary format.
    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("binary raster shorter than header".into()));
        }
        if &bytes[0..4] != b"SNNR" {
            return Err(Error::Format("bad binary raster magic".into()));
        }
        let t_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if flags != 0 {
            return Err(Error::Format(format!("unsupported raster flags {flags}")));
        }
        let bits = t_len * n;
        let payload = &bytes[16..];
        if payload.len() != (bits + 7) / 8 {
            return Err(Error::Format(format!(
                "binary raster payload length {} != expected {}",
                payload.len(),
                (bits + 7) / 8
            )));
        }
        let mut r = SpikeRaster::zeros(t_len, n);
        for bit in 0..bits {
            if payload[bit / 8] & (1 << (bit % 8)) != 0 {
                r.data[[bit / n, bit % n]] = 1.0;
            }
        }
        Ok(r)
    }
}
