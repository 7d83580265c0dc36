//! Modbus TCP: MBAP framing, holding-register read (0x03) and write
//! multiple (0x10), and the plant-side register bank.
//!
//! Register map (holding registers, big-endian words):
//!
//! | addr | content                         | scaling       | access |
//! |------|---------------------------------|---------------|--------|
//! | 0    | battery SoC                     | % x 100, u16  | read   |
//! | 1    | PV generation                   | kW x 10, u16  | read   |
//! | 2    | inverter P reference            | kW x 10, i16  | write  |
//! | 3    | inverter Q reference            | kvar x 10, i16| write  |
//! | 4    | heartbeat, bumped by the plant  | counter       | read   |
//! | 5    | fault flags                     | bits          | read   |

use crate::error::{ProtoError, Result};

pub const PROTOCOL_ID: u16 = 0;
pub const MBAP_LEN: usize = 7;
pub const REGISTER_COUNT: u16 = 6;
/// Largest ADU we accept: MBAP plus a 253-byte PDU.
pub const MAX_ADU_LEN: usize = MBAP_LEN + 253 - 1;
const MAX_READ: u16 = 125;
const MAX_WRITE: u16 = 123;

pub mod reg {
    pub const SOC: u16 = 0;
    pub const PV: u16 = 1;
    pub const P_REF: u16 = 2;
    pub const Q_REF: u16 = 3;
    pub const HEARTBEAT: u16 = 4;
    pub const FAULTS: u16 = 5;
}

pub const FC_READ_HOLDING: u8 = 0x03;
pub const FC_WRITE_MULTIPLE: u8 = 0x10;

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionCode {
    IllegalFunction = 0x01,
    IllegalDataAddress = 0x02,
    IllegalDataValue = 0x03,
    ServerDeviceFailure = 0x04,
}

impl ExceptionCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x01 => Some(Self::IllegalFunction),
            0x02 => Some(Self::IllegalDataAddress),
            0x03 => Some(Self::IllegalDataValue),
            0x04 => Some(Self::ServerDeviceFailure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestPdu {
    ReadHolding { addr: u16, count: u16 },
    WriteMultiple { addr: u16, values: Vec<u16> },
    /// Any other function code; answered with an exception.
    Unsupported { function: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub txn: u16,
    pub unit: u8,
    pub pdu: RequestPdu,
}

impl Request {
    pub fn read(txn: u16, unit: u8, addr: u16, count: u16) -> Self {
        Self { txn, unit, pdu: RequestPdu::ReadHolding { addr, count } }
    }

    pub fn write(txn: u16, unit: u8, addr: u16, values: Vec<u16>) -> Self {
        Self { txn, unit, pdu: RequestPdu::WriteMultiple { addr, values } }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponsePdu {
    ReadHolding { values: Vec<u16> },
    WriteMultiple { addr: u16, count: u16 },
    Exception { function: u8, code: ExceptionCode },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub txn: u16,
    pub unit: u8,
    pub pdu: ResponsePdu,
}

fn adu(txn: u16, unit: u8, pdu: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MBAP_LEN + pdu.len());
    out.extend_from_slice(&txn.to_be_bytes());
    out.extend_from_slice(&PROTOCOL_ID.to_be_bytes());
    out.extend_from_slice(&((pdu.len() + 1) as u16).to_be_bytes());
    out.push(unit);
    out.extend_from_slice(pdu);
    out
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>> {
    let mut pdu = Vec::new();
    match &req.pdu {
        RequestPdu::ReadHolding { addr, count } => {
            pdu.push(FC_READ_HOLDING);
            pdu.extend_from_slice(&addr.to_be_bytes());
            pdu.extend_from_slice(&count.to_be_bytes());
        }
        RequestPdu::WriteMultiple { addr, values } => {
            if values.is_empty() || values.len() > usize::from(MAX_WRITE) {
                return Err(ProtoError::InvalidField(format!("cannot write {} registers", values.len())));
            }
            pdu.push(FC_WRITE_MULTIPLE);
            pdu.extend_from_slice(&addr.to_be_bytes());
            pdu.extend_from_slice(&(values.len() as u16).to_be_bytes());
            pdu.push((values.len() * 2) as u8);
            for v in values {
                pdu.extend_from_slice(&v.to_be_bytes());
            }
        }
        RequestPdu::Unsupported { function } => pdu.push(*function),
    }
    Ok(adu(req.txn, req.unit, &pdu))
}

pub fn encode_response(resp: &Response) -> Result<Vec<u8>> {
    let mut pdu = Vec::new();
    match &resp.pdu {
        ResponsePdu::ReadHolding { values } => {
            if values.len() > usize::from(MAX_READ) {
                return Err(ProtoError::InvalidField(format!("cannot return {} registers", values.len())));
            }
            pdu.push(FC_READ_HOLDING);
            pdu.push((values.len() * 2) as u8);
            for v in values {
                pdu.extend_from_slice(&v.to_be_bytes());
            }
        }
        ResponsePdu::WriteMultiple { addr, count } => {
            pdu.push(FC_WRITE_MULTIPLE);
            pdu.extend_from_slice(&addr.to_be_bytes());
            pdu.extend_from_slice(&count.to_be_bytes());
        }
        ResponsePdu::Exception { function, code } => {
            pdu.push(function | 0x80);
            pdu.push(*code as u8);
        }
    }
    Ok(adu(resp.txn, resp.unit, &pdu))
}

/// Total ADU length announced by a buffered MBAP header, once at least
/// [`MBAP_LEN`] bytes are present.
pub fn frame_length(buf: &[u8]) -> Option<Result<usize>> {
    if buf.len() < MBAP_LEN {
        return None;
    }
    let protocol = u16::from_be_bytes([buf[2], buf[3]]);
    if protocol != PROTOCOL_ID {
        return Some(Err(ProtoError::Framing(format!("protocol id {protocol} is not Modbus"))));
    }
    let len = usize::from(u16::from_be_bytes([buf[4], buf[5]]));
    if len < 2 || MBAP_LEN - 1 + len > MAX_ADU_LEN {
        return Some(Err(ProtoError::Framing(format!("MBAP length {len} out of range"))));
    }
    Some(Ok(MBAP_LEN - 1 + len))
}

/// Splits a complete ADU into (txn, unit, pdu).
fn split(bytes: &[u8]) -> Result<(u16, u8, &[u8])> {
    let total = match frame_length(bytes) {
        None => return Err(ProtoError::Framing(format!("{} bytes is shorter than an MBAP header", bytes.len()))),
        Some(r) => r?,
    };
    if bytes.len() != total {
        return Err(ProtoError::Framing(format!("MBAP announces {total} bytes, got {}", bytes.len())));
    }
    Ok((u16::from_be_bytes([bytes[0], bytes[1]]), bytes[6], &bytes[MBAP_LEN..]))
}

fn word(pdu: &[u8], i: usize) -> u16 {
    u16::from_be_bytes([pdu[i], pdu[i + 1]])
}

fn need(pdu: &[u8], len: usize, what: &str) -> Result<()> {
    if pdu.len() == len {
        Ok(())
    } else {
        Err(ProtoError::Framing(format!("{what} PDU is {} bytes, expected {len}", pdu.len())))
    }
}

fn words(data: &[u8], byte_count: usize) -> Result<Vec<u16>> {
    if byte_count % 2 != 0 || data.len() != byte_count {
        return Err(ProtoError::Framing(format!("byte count {byte_count} does not match {} data bytes", data.len())));
    }
    Ok(data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
}

pub fn decode_request(bytes: &[u8]) -> Result<Request> {
    let (txn, unit, pdu) = split(bytes)?;
    let pdu = match pdu[0] {
        FC_READ_HOLDING => {
            need(pdu, 5, "read")?;
            RequestPdu::ReadHolding { addr: word(pdu, 1), count: word(pdu, 3) }
        }
        FC_WRITE_MULTIPLE => {
            if pdu.len() < 6 {
                return Err(ProtoError::Framing("write PDU too short".into()));
            }
            let count = usize::from(word(pdu, 3));
            let values = words(&pdu[6..], usize::from(pdu[5]))?;
            if values.len() != count {
                return Err(ProtoError::Framing(format!("write of {count} registers carries {}", values.len())));
            }
            RequestPdu::WriteMultiple { addr: word(pdu, 1), values }
        }
        function => RequestPdu::Unsupported { function },
    };
    Ok(Request { txn, unit, pdu })
}

pub fn decode_response(bytes: &[u8]) -> Result<Response> {
    let (txn, unit, pdu) = split(bytes)?;
    let pdu = match pdu[0] {
        f if f & 0x80 != 0 => {
            need(pdu, 2, "exception")?;
            let code = ExceptionCode::from_u8(pdu[1])
                .ok_or_else(|| ProtoError::InvalidField(format!("exception code {:#04x}", pdu[1])))?;
            ResponsePdu::Exception { function: f & 0x7F, code }
        }
        FC_READ_HOLDING => {
            if pdu.len() < 2 {
                return Err(ProtoError::Framing("read response too short".into()));
            }
            ResponsePdu::ReadHolding { values: words(&pdu[2..], usize::from(pdu[1]))? }
        }
        FC_WRITE_MULTIPLE => {
            need(pdu, 5, "write response")?;
            ResponsePdu::WriteMultiple { addr: word(pdu, 1), count: word(pdu, 3) }
        }
        f => return Err(ProtoError::InvalidField(format!("unexpected function code {f:#04x}"))),
    };
    Ok(Response { txn, unit, pdu })
}

/// SoC percentage to register counts; clamped to [0, 100].
pub fn soc_to_reg(pct: f64) -> u16 {
    (pct.clamp(0.0, 100.0) * 100.0).round() as u16
}

pub fn reg_to_soc(v: u16) -> f64 {
    f64::from(v) / 100.0
}

/// PV power to register counts; negative readings clamp to zero.
pub fn pv_to_reg(kw: f64) -> u16 {
    (kw.clamp(0.0, f64::from(u16::MAX) / 10.0) * 10.0).round() as u16
}

pub fn reg_to_pv(v: u16) -> f64 {
    f64::from(v) / 10.0
}

/// Signed power to register counts, saturating at the i16 range.
pub fn power_to_reg(kw: f64) -> i16 {
    if kw.is_nan() {
        return 0;
    }
    (kw * 10.0).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

pub fn reg_to_power(v: i16) -> f64 {
    f64::from(v) / 10.0
}

/// The plant's holding registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterBank {
    regs: [u16; REGISTER_COUNT as usize],
    p_limit: i16,
    q_limit: i16,
    /// Accepted writes to the reference registers.
    pub writes: u64,
}

impl RegisterBank {
    /// `p_max` / `q_max` bound the reference registers (kW, kvar).
    pub fn new(p_max: f64, q_max: f64) -> Self {
        Self { regs: [0; REGISTER_COUNT as usize], p_limit: power_to_reg(p_max), q_limit: power_to_reg(q_max), writes: 0 }
    }

    pub fn registers(&self) -> &[u16] {
        &self.regs
    }

    pub fn read(&self, addr: u16, count: u16) -> std::result::Result<Vec<u16>, ExceptionCode> {
        if count == 0 || count > MAX_READ {
            return Err(ExceptionCode::IllegalDataValue);
        }
        let end = u32::from(addr) + u32::from(count);
        if end > u32::from(REGISTER_COUNT) {
            return Err(ExceptionCode::IllegalDataAddress);
        }
        Ok(self.regs[usize::from(addr)..end as usize].to_vec())
    }

    /// Writes reference registers; all-or-nothing.
    pub fn write(&mut self, addr: u16, values: &[u16]) -> std::result::Result<(), ExceptionCode> {
        if values.is_empty() || values.len() > usize::from(MAX_WRITE) {
            return Err(ExceptionCode::IllegalDataValue);
        }
        let end = u32::from(addr) + values.len() as u32;
        if addr < reg::P_REF || end > u32::from(reg::Q_REF) + 1 {
            return Err(ExceptionCode::IllegalDataAddress);
        }
        for (i, &v) in values.iter().enumerate() {
            let limit = if addr as usize + i == reg::P_REF as usize { self.p_limit } else { self.q_limit };
            let v = v as i16;
            if v.unsigned_abs() > limit.unsigned_abs() {
                return Err(ExceptionCode::IllegalDataValue);
            }
        }
        self.regs[usize::from(addr)..end as usize].copy_from_slice(values);
        self.writes += 1;
        Ok(())
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        let pdu = match &req.pdu {
            RequestPdu::ReadHolding { addr, count } => match self.read(*addr, *count) {
                Ok(values) => ResponsePdu::ReadHolding { values },
                Err(code) => ResponsePdu::Exception { function: FC_READ_HOLDING, code },
            },
            RequestPdu::WriteMultiple { addr, values } => match self.write(*addr, values) {
                Ok(()) => ResponsePdu::WriteMultiple { addr: *addr, count: values.len() as u16 },
                Err(code) => ResponsePdu::Exception { function: FC_WRITE_MULTIPLE, code },
            },
            RequestPdu::Unsupported { function } => {
                ResponsePdu::Exception { function: function & 0x7F, code: ExceptionCode::IllegalFunction }
            }
        };
        Response { txn: req.txn, unit: req.unit, pdu }
    }

    pub fn set_soc(&mut self, pct: f64) {
        self.regs[reg::SOC as usize] = soc_to_reg(pct);
    }

    pub fn soc(&self) -> f64 {
        reg_to_soc(self.regs[reg::SOC as usize])
    }

    pub fn set_pv(&mut self, kw: f64) {
        self.regs[reg::PV as usize] = pv_to_reg(kw);
    }

    pub fn pv(&self) -> f64 {
        reg_to_pv(self.regs[reg::PV as usize])
    }

    /// Inverter references currently held, kW / kvar.
    pub fn references(&self) -> (f64, f64) {
        (reg_to_power(self.regs[reg::P_REF as usize] as i16), reg_to_power(self.regs[reg::Q_REF as usize] as i16))
    }

    pub fn bump_heartbeat(&mut self) -> u16 {
        let h = &mut self.regs[reg::HEARTBEAT as usize];
        *h = h.wrapping_add(1);
        *h
    }

    pub fn heartbeat(&self) -> u16 {
        self.regs[reg::HEARTBEAT as usize]
    }

    pub fn set_faults(&mut self, bits: u16) {
        self.regs[reg::FAULTS as usize] = bits;
    }

    pub fn faults(&self) -> u16 {
        self.regs[reg::FAULTS as usize]
    }
}

/// The write a controller sends to set both inverter references.
pub fn reference_write(txn: u16, unit: u8, p_kw: f64, q_kvar: f64) -> Request {
    Request::write(txn, unit, reg::P_REF, vec![power_to_reg(p_kw) as u16, power_to_reg(q_kvar) as u16])
}
