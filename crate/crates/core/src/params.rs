//! Learnable parameters, grouped so that training phases can freeze them
//! independently, and their checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"DDLC"  u32 version  u32 group_count
//! per group: u32 name_len, name bytes (UTF-8), u8 frozen, u32 len, len x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::cost_volume::aggregation_param_len;
use crate::error::{Error, Result};
use crate::refinement::{softplus_inverse, FuHead, SuHead, CANDIDATES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Aggregation,
    Compression,
    SuHead,
    FuHead,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Aggregation, Group::Compression, Group::SuHead, Group::FuHead];

    pub fn name(self) -> &'static str {
        match self {
            Group::Aggregation => "aggregation",
            Group::Compression => "compression",
            Group::SuHead => "su_head",
            Group::FuHead => "fu_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Initial values of the learnable maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Weight on absolute feature differences in the aggregation.
    pub abs_weight: f64,
    /// Constant scale uncertainty (meters in depth mode, pixels in pixel mode).
    pub su: f64,
    /// Constant feature uncertainty.
    pub fu: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            abs_weight: 8.0,
            su: 5.0,
            fu: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    groups: [Vec<f64>; 4],
    frozen: [bool; 4],
}

impl ParamVector {
    /// Parameters for `channels` feature channels per view.
    pub fn init(channels: usize, init: &InitConfig) -> Result<Self> {
        if !(init.su > 0.0 && init.fu > 0.0) {
            return Err(Error::Argument("initial SU and FU must be positive".into()));
        }
        let c = channels;
        let mut aggregation = vec![0.0; aggregation_param_len(2 * c)];
        aggregation[..c].iter_mut().for_each(|a| *a = init.abs_weight);

        let mut compression = vec![0.0; c * 3 * c];
        for k in 0..c {
            compression[k * 3 * c + c + k] = 1.0;
        }

        let mut su_head = vec![0.0; SuHead::param_len(c)];
        su_head[c + 1] = softplus_inverse(init.su);

        let mut fu_head = vec![0.0; FuHead::param_len(c)];
        fu_head[6 * c..].iter_mut().for_each(|b| *b = softplus_inverse(init.fu));

        Ok(ParamVector {
            groups: [aggregation, compression, su_head, fu_head],
            frozen: [false; 4],
        })
    }

    /// Builds a vector from explicit groups; lengths must be consistent with `channels`.
    pub fn from_groups(channels: usize, groups: [Vec<f64>; 4]) -> Result<Self> {
        let expect = Self::group_lengths(channels);
        for (g, (v, n)) in Group::ALL.iter().zip(groups.iter().zip(expect)) {
            if v.len() != n {
                return Err(Error::Argument(format!(
                    "group {} has {} values, expected {n}",
                    g.name(),
                    v.len()
                )));
            }
        }
        let p = ParamVector {
            groups,
            frozen: [false; 4],
        };
        p.check_finite()?;
        Ok(p)
    }

    pub fn group_lengths(channels: usize) -> [usize; 4] {
        let c = channels;
        [
            aggregation_param_len(2 * c),
            3 * c * c,
            SuHead::param_len(c),
            3 * c * (2 + CANDIDATES),
        ]
    }

    /// Feature channels per view implied by the group sizes.
    pub fn channels(&self) -> usize {
        self.groups[Group::SuHead.index()].len() - 2
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen[g.index()]
    }

    pub fn set_frozen(&mut self, g: Group, frozen: bool) {
        self.frozen[g.index()] = frozen;
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in group order.
    pub fn flat(&self) -> Vec<f64> {
        self.groups.concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Argument(format!(
                "flat vector has {} values, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut o = 0;
        for g in self.groups.iter_mut() {
            let n = g.len();
            g.copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        Ok(())
    }

    /// `(group, index within group)` of every flat position.
    pub fn flat_layout(&self) -> Vec<(Group, usize)> {
        Group::ALL
            .iter()
            .flat_map(|&g| (0..self.group(g).len()).map(move |i| (g, i)))
            .collect()
    }

    /// Same shape, all zeros, nothing frozen.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            groups: self.groups.clone().map(|g| vec![0.0; g.len()]),
            frozen: [false; 4],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for g in Group::ALL {
            if let Some(i) = self.group(g).iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("{}[{i}] is not finite", g.name())));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + 8 * self.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(Group::ALL.len() as u32).to_le_bytes());
        for g in Group::ALL {
            let name = g.name().as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(self.is_frozen(g) as u8);
            let vals = self.group(g);
            buf.extend_from_slice(&(vals.len() as u32).to_le_bytes());
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes)
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(version_at, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut groups: [Option<Vec<f64>>; 4] = Default::default();
        let mut frozen = [false; 4];
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(at, "group name is not UTF-8"))?;
            let g = Group::from_name(name).ok_or_else(|| Error::format(at, format!("unknown group '{name}'")))?;
            frozen[g.index()] = r.take(1)?[0] != 0;
            let len = r.u32()? as usize;
            let mut vals = Vec::with_capacity(len);
            for _ in 0..len {
                vals.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            groups[g.index()] = Some(vals);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last group"));
        }
        let groups = groups.map(|g| g.unwrap_or_default());
        let channels = groups[Group::SuHead.index()].len().saturating_sub(2);
        let mut p = ParamVector::from_groups(channels, groups)?;
        p.frozen = frozen;
        Ok(p)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
