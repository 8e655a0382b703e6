//! Bitstream container.
//!
//! ```text
//! offset  size  field
//! 0       2     magic "MC"
//! 2       1     version (high nibble) | flags (low nibble)
//!                 flag bit 0: best effort (rate target missed)
//!                 flag bit 1: bias index segment present
//! 3       1     codec id (high nibble) | bits - 1 (low nibble)
//! 4       1     channels (high nibble) | scales M (low nibble)
//! 5       var   LEB128 original height, original width,
//!               padded height, padded width,
//!               [bias segment length, only with flag bit 1],
//!               payload length
//! ..      4     CRC-32 of the symbols, little endian
//! ..      n     bias indices, one byte per tile (255 = default biases)
//! ..      m     arithmetic-coded payload
//! ```

use crate::error::ContainerError;

pub const MAGIC: [u8; 2] = *b"MC";
pub const VERSION: u8 = 1;
const FLAG_BEST_EFFORT: u8 = 1;
const FLAG_BIAS: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub best_effort: bool,
    pub codec_id: u8,
    pub bits: u8,
    pub channels: u8,
    pub num_scales: u8,
    pub orig_height: u32,
    pub orig_width: u32,
    pub padded_height: u32,
    pub padded_width: u32,
    pub checksum: u32,
    /// Empty when every tile uses the default biases.
    pub bias_indices: Vec<u8>,
    pub payload: Vec<u8>,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn byte(&mut self) -> Result<u8, ContainerError> {
        let b = *self.bytes.get(self.pos).ok_or(ContainerError::Length)?;
        self.pos += 1;
        Ok(b)
    }

    fn varint(&mut self) -> Result<u64, ContainerError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(ContainerError::Field("varint"))
    }

    fn take(&mut self, n: usize) -> Result<&[u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Length)?;
        let s = self.bytes.get(self.pos..end).ok_or(ContainerError::Length)?;
        self.pos = end;
        Ok(s)
    }
}

impl Bitstream {
    fn validate(&self) -> Result<(), ContainerError> {
        if self.codec_id > 15 {
            return Err(ContainerError::Field("codec id"));
        }
        if !(1..=8).contains(&self.bits) {
            return Err(ContainerError::Field("bits"));
        }
        if !(1..=15).contains(&self.channels) {
            return Err(ContainerError::Field("channels"));
        }
        if !(1..=15).contains(&self.num_scales) {
            return Err(ContainerError::Field("scales"));
        }
        if self.orig_height == 0 || self.orig_width == 0 {
            return Err(ContainerError::Field("dimensions"));
        }
        if self.padded_height < self.orig_height || self.padded_width < self.orig_width {
            return Err(ContainerError::Field("padded dimensions"));
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>, ContainerError> {
        self.validate()?;
        let mut out = Vec::with_capacity(16 + self.bias_indices.len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        let has_bias = !self.bias_indices.is_empty();
        let flags = (u8::from(self.best_effort) * FLAG_BEST_EFFORT) | (u8::from(has_bias) * FLAG_BIAS);
        out.push(VERSION << 4 | flags);
        out.push(self.codec_id << 4 | (self.bits - 1));
        out.push(self.channels << 4 | self.num_scales);
        for v in [self.orig_height, self.orig_width, self.padded_height, self.padded_width] {
            put_varint(&mut out, v.into());
        }
        if has_bias {
            put_varint(&mut out, self.bias_indices.len() as u64);
        }
        put_varint(&mut out, self.payload.len() as u64);
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.bias_indices);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Bitstream, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(2).map_err(|_| ContainerError::BadMagic)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let vf = r.byte()?;
        if vf >> 4 != VERSION {
            return Err(ContainerError::UnsupportedVersion(vf >> 4));
        }
        let flags = vf & 0x0f;
        if flags & !(FLAG_BEST_EFFORT | FLAG_BIAS) != 0 {
            return Err(ContainerError::Field("flags"));
        }
        let cb = r.byte()?;
        let cm = r.byte()?;
        let mut dim = || -> Result<u32, ContainerError> {
            u32::try_from(r.varint()?).map_err(|_| ContainerError::Field("dimensions"))
        };
        let (orig_height, orig_width, padded_height, padded_width) = (dim()?, dim()?, dim()?, dim()?);
        let bias_len = if flags & FLAG_BIAS != 0 { r.varint()? } else { 0 };
        let payload_len = r.varint()?;
        let checksum = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let bias_len = usize::try_from(bias_len).map_err(|_| ContainerError::Length)?;
        let payload_len = usize::try_from(payload_len).map_err(|_| ContainerError::Length)?;
        if flags & FLAG_BIAS != 0 && bias_len == 0 {
            return Err(ContainerError::Field("bias segment"));
        }
        if bytes.len() - r.pos != bias_len.checked_add(payload_len).ok_or(ContainerError::Length)? {
            return Err(ContainerError::Length);
        }
        let bias_indices = r.take(bias_len)?.to_vec();
        let payload = r.take(payload_len)?.to_vec();
        let bs = Bitstream {
            best_effort: flags & FLAG_BEST_EFFORT != 0,
            codec_id: cb >> 4,
            bits: (cb & 0x0f) + 1,
            channels: cm >> 4,
            num_scales: cm & 0x0f,
            orig_height,
            orig_width,
            padded_height,
            padded_width,
            checksum,
            bias_indices,
            payload,
        };
        bs.validate()?;
        Ok(bs)
    }

    /// Bytes before the bias segment.
    pub fn header_len(&self) -> usize {
        self.serialize().map_or(0, |b| b.len() - self.bias_indices.len() - self.payload.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Bitstream {
        Bitstream {
            best_effort: false,
            codec_id: 2,
            bits: 4,
            channels: 3,
            num_scales: 3,
            orig_height: 60,
            orig_width: 300,
            padded_height: 64,
            padded_width: 300,
            checksum: 0xdead_beef,
            bias_indices: vec![],
            payload: vec![1, 2, 3],
        }
    }

    #[test]
    fn layout_offsets() {
        let bytes = sample().serialize().unwrap();
        assert_eq!(&bytes[..2], b"MC");
        assert_eq!(bytes[2], 0x10);
        assert_eq!(bytes[3], 0x23);
        assert_eq!(bytes[4], 0x33);
        // 60, 300 (2 bytes), 64, 300 (2 bytes), payload length 3
        assert_eq!(&bytes[5..12], &[60, 0xac, 0x02, 64, 0xac, 0x02, 3]);
        assert_eq!(&bytes[12..16], &0xdead_beefu32.to_le_bytes());
        assert_eq!(&bytes[16..], &[1, 2, 3]);
        assert_eq!(sample().header_len(), 16);
    }

    #[test]
    fn errors() {
        let bytes = sample().serialize().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert_eq!(Bitstream::parse(&bad), Err(ContainerError::BadMagic));
        let mut bad = bytes.clone();
        bad[2] = 0x20;
        assert_eq!(Bitstream::parse(&bad), Err(ContainerError::UnsupportedVersion(2)));
        assert_eq!(Bitstream::parse(&bytes[..bytes.len() - 1]), Err(ContainerError::Length));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(Bitstream::parse(&long), Err(ContainerError::Length));
        assert_eq!(Bitstream::parse(&bytes[..1]), Err(ContainerError::BadMagic));
        assert!(Bitstream { bits: 9, ..sample() }.serialize().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            best_effort: bool,
            codec_id in 0u8..16,
            bits in 1u8..=8,
            channels in 1u8..16,
            num_scales in 1u8..16,
            oh in 1u32..100_000,
            ow in 1u32..100_000,
            ph in 0u32..64,
            pw in 0u32..64,
            checksum: u32,
            bias_indices in proptest::collection::vec(any::<u8>(), 0..20),
            payload in proptest::collection::vec(any::<u8>(), 0..300),
        ) {
            let bs = Bitstream {
                best_effort, codec_id, bits, channels, num_scales,
                orig_height: oh, orig_width: ow, padded_height: oh + ph, padded_width: ow + pw,
                checksum, bias_indices, payload,
            };
            let bytes = bs.serialize().unwrap();
            let back = Bitstream::parse(&bytes).unwrap();
            prop_assert_eq!(&back, &bs);
            prop_assert_eq!(back.serialize().unwrap(), bytes);
        }
    }
}
