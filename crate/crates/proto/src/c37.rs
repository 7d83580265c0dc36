//! Fixed-configuration synchrophasor frames.
//!
//! Data frame, all fields big-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 2    | sync `AA 01`                            |
//! | 2      | 2    | framesize (50)                          |
//! | 4      | 2    | idcode (PMU 1-6)                        |
//! | 6      | 4    | SOC, epoch seconds                      |
//! | 10     | 4    | FRACSEC: quality << 24 \| microseconds |
//! | 14     | 2    | STAT                                    |
//! | 16     | 16   | V and I phasors, f32 re/im              |
//! | 32     | 4    | frequency deviation from nominal, Hz    |
//! | 36     | 4    | ROCOF, Hz/s                             |
//! | 40     | 8    | analogs: P (kW), Q (kvar), f32          |
//! | 48     | 2    | CRC-CCITT of bytes 0..48                |
//!
//! Command frame: sync `AA 41`, framesize 18, idcode, SOC, FRACSEC,
//! command word, CRC.

use crate::crc::crc_ccitt;
use crate::error::{ProtoError, Result};

pub const SYNC_LEAD: u8 = 0xAA;
pub const SYNC_DATA: u8 = 0x01;
pub const SYNC_COMMAND: u8 = 0x41;
pub const DATA_FRAME_LEN: usize = 50;
pub const COMMAND_FRAME_LEN: usize = 18;
pub const MAX_PMU_ID: u16 = 6;
const FRACSEC_MAX: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phasor {
    pub re: f32,
    pub im: f32,
}

impl Phasor {
    pub fn from_polar(mag: f64, ang: f64) -> Self {
        Self { re: (mag * ang.cos()) as f32, im: (mag * ang.sin()) as f32 }
    }

    pub fn magnitude(&self) -> f64 {
        f64::from(self.re).hypot(f64::from(self.im))
    }
}

/// One PMU measurement set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhasorSample {
    pub voltage: Phasor,
    pub current: Phasor,
    /// Hz off nominal.
    pub freq_dev: f32,
    pub dfreq: f32,
    pub p_kw: f32,
    pub q_kvar: f32,
}

impl PhasorSample {
    fn values(&self) -> [f32; 8] {
        [
            self.voltage.re,
            self.voltage.im,
            self.current.re,
            self.current.im,
            self.freq_dev,
            self.dfreq,
            self.p_kw,
            self.q_kvar,
        ]
    }

    fn from_values(v: [f32; 8]) -> Self {
        Self {
            voltage: Phasor { re: v[0], im: v[1] },
            current: Phasor { re: v[2], im: v[3] },
            freq_dev: v[4],
            dfreq: v[5],
            p_kw: v[6],
            q_kvar: v[7],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, PartialOrd, Ord)]
pub struct Timestamp {
    pub soc: u32,
    /// Below one million.
    pub micros: u32,
    pub quality: u8,
}

impl Timestamp {
    pub fn from_secs_f64(t: f64) -> Self {
        let t = t.max(0.0);
        let mut soc = t.floor() as u32;
        let mut micros = ((t - t.floor()) * 1e6).round() as u32;
        if micros >= FRACSEC_MAX {
            soc += 1;
            micros -= FRACSEC_MAX;
        }
        Self { soc, micros, quality: 0 }
    }

    pub fn as_secs_f64(&self) -> f64 {
        f64::from(self.soc) + f64::from(self.micros) * 1e-6
    }

    fn fracsec(&self) -> u32 {
        u32::from(self.quality) << 24 | self.micros
    }

    fn from_fracsec(soc: u32, fracsec: u32) -> Result<Self> {
        let micros = fracsec & 0x00FF_FFFF;
        if micros >= FRACSEC_MAX {
            return Err(ProtoError::InvalidField(format!("FRACSEC {micros} is not below one second")));
        }
        Ok(Self { soc, micros, quality: (fracsec >> 24) as u8 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataFrame {
    pub idcode: u16,
    pub timestamp: Timestamp,
    pub stat: u16,
    pub sample: PhasorSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stop,
    Start,
    Other(u16),
}

impl Command {
    pub fn code(self) -> u16 {
        match self {
            Command::Stop => 0x0001,
            Command::Start => 0x0002,
            Command::Other(c) => c,
        }
    }

    pub fn from_code(c: u16) -> Self {
        match c {
            0x0001 => Command::Stop,
            0x0002 => Command::Start,
            other => Command::Other(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandFrame {
    pub idcode: u16,
    pub timestamp: Timestamp,
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frame {
    Data(DataFrame),
    Command(CommandFrame),
}

fn check_idcode(idcode: u16) -> Result<()> {
    if (1..=MAX_PMU_ID).contains(&idcode) {
        Ok(())
    } else {
        Err(ProtoError::InvalidField(format!("idcode {idcode} outside 1-{MAX_PMU_ID}")))
    }
}

fn put_header(buf: &mut Vec<u8>, sync: u8, len: usize, idcode: u16, ts: &Timestamp) -> Result<()> {
    if ts.micros >= FRACSEC_MAX {
        return Err(ProtoError::InvalidField(format!("microseconds {} out of range", ts.micros)));
    }
    buf.extend_from_slice(&[SYNC_LEAD, sync]);
    buf.extend_from_slice(&(len as u16).to_be_bytes());
    buf.extend_from_slice(&idcode.to_be_bytes());
    buf.extend_from_slice(&ts.soc.to_be_bytes());
    buf.extend_from_slice(&ts.fracsec().to_be_bytes());
    Ok(())
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc_ccitt(&buf);
    buf.extend_from_slice(&crc.to_be_bytes());
    buf
}

pub fn encode_data_frame(frame: &DataFrame) -> Result<Vec<u8>> {
    check_idcode(frame.idcode)?;
    let values = frame.sample.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ProtoError::NonFinite("phasor sample"));
    }
    let mut buf = Vec::with_capacity(DATA_FRAME_LEN);
    put_header(&mut buf, SYNC_DATA, DATA_FRAME_LEN, frame.idcode, &frame.timestamp)?;
    buf.extend_from_slice(&frame.stat.to_be_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    Ok(seal(buf))
}

pub fn encode_command_frame(frame: &CommandFrame) -> Result<Vec<u8>> {
    check_idcode(frame.idcode)?;
    let mut buf = Vec::with_capacity(COMMAND_FRAME_LEN);
    put_header(&mut buf, SYNC_COMMAND, COMMAND_FRAME_LEN, frame.idcode, &frame.timestamp)?;
    buf.extend_from_slice(&frame.command.code().to_be_bytes());
    Ok(seal(buf))
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_be_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_be_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Validates sync, size and checksum of a complete frame, returning the
/// sync type byte.
fn validate(bytes: &[u8]) -> Result<u8> {
    if bytes.len() < 4 {
        return Err(ProtoError::Framing(format!("{} bytes is shorter than a header", bytes.len())));
    }
    if bytes[0] != SYNC_LEAD {
        return Err(ProtoError::Framing(format!("bad sync byte {:#04x}", bytes[0])));
    }
    let expected = match bytes[1] {
        SYNC_DATA => DATA_FRAME_LEN,
        SYNC_COMMAND => COMMAND_FRAME_LEN,
        other => return Err(ProtoError::Framing(format!("unsupported frame type {other:#04x}"))),
    };
    let stated = usize::from(u16_at(bytes, 2));
    if stated != expected || bytes.len() != expected {
        return Err(ProtoError::Framing(format!(
            "framesize {stated}, got {} bytes, layout needs {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 2];
    let stated = u16_at(bytes, expected - 2);
    let computed = crc_ccitt(body);
    if stated != computed {
        return Err(ProtoError::Checksum { stated, computed });
    }
    Ok(bytes[1])
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    let kind = validate(bytes)?;
    let idcode = u16_at(bytes, 4);
    check_idcode(idcode)?;
    let timestamp = Timestamp::from_fracsec(u32_at(bytes, 6), u32_at(bytes, 10))?;
    if kind == SYNC_COMMAND {
        let command = Command::from_code(u16_at(bytes, 14));
        return Ok(Frame::Command(CommandFrame { idcode, timestamp, command }));
    }
    let stat = u16_at(bytes, 14);
    let mut values = [0f32; 8];
    for (i, v) in values.iter_mut().enumerate() {
        *v = f32::from_bits(u32_at(bytes, 16 + 4 * i));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ProtoError::NonFinite("phasor sample"));
    }
    Ok(Frame::Data(DataFrame { idcode, timestamp, stat, sample: PhasorSample::from_values(values) }))
}

pub fn decode_data_frame(bytes: &[u8]) -> Result<DataFrame> {
    match decode_frame(bytes)? {
        Frame::Data(d) => Ok(d),
        Frame::Command(_) => Err(ProtoError::Framing("expected a data frame, got a command".into())),
    }
}

pub fn decode_command_frame(bytes: &[u8]) -> Result<CommandFrame> {
    match decode_frame(bytes)? {
        Frame::Command(c) => Ok(c),
        Frame::Data(_) => Err(ProtoError::Framing("expected a command frame, got data".into())),
    }
}

/// Splits a byte stream into frames.
///
/// Bytes that cannot start a frame are skipped one at a time until the
/// next sync byte; frames that fail validation are dropped and counted.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    pub checksum_errors: u64,
    pub framing_errors: u64,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// The next good frame, or `None` once more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Frame> {
        loop {
            let start = self.buf.iter().position(|&b| b == SYNC_LEAD);
            match start {
                None => {
                    if !self.buf.is_empty() {
                        self.framing_errors += 1;
                    }
                    self.buf.clear();
                    return None;
                }
                Some(0) => {}
                Some(n) => {
                    self.framing_errors += 1;
                    self.buf.drain(..n);
                }
            }
            if self.buf.len() < 2 {
                return None;
            }
            let len = match self.buf[1] {
                SYNC_DATA => DATA_FRAME_LEN,
                SYNC_COMMAND => COMMAND_FRAME_LEN,
                _ => {
                    self.framing_errors += 1;
                    self.buf.drain(..1);
                    continue;
                }
            };
            if self.buf.len() < len {
                return None;
            }
            match decode_frame(&self.buf[..len]) {
                Ok(frame) => {
                    self.buf.drain(..len);
                    return Some(frame);
                }
                Err(ProtoError::Checksum { .. }) => {
                    self.checksum_errors += 1;
                    self.buf.drain(..1);
                }
                Err(_) => {
                    self.framing_errors += 1;
                    self.buf.drain(..1);
                }
            }
        }
    }
}
