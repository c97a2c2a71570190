//! Wire format: `u32 LE payload length | u8 opcode | payload`.

use std::io::{self, Read, Write};

pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    Publish = 0x01,
    Fetch = 0x02,
    List = 0x03,
    Ok = 0x04,
    Err = 0x05,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Opcode::Publish,
            0x02 => Opcode::Fetch,
            0x03 => Opcode::List,
            0x04 => Opcode::Ok,
            0x05 => Opcode::Err,
            _ => return None,
        })
    }
}

/// A frame as read off the wire. Unknown opcodes and oversized payloads are
/// kept as raw frames so the reader stays in sync with the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Incoming {
    Frame(Opcode, Vec<u8>),
    UnknownOpcode(u8),
    Oversized(usize),
}

pub fn write_frame<W: Write>(w: &mut W, op: Opcode, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds 64 MiB"));
    }
    let mut header = [0u8; 5];
    header[..4].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    header[4] = op as u8;
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Incoming>> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(Some(Incoming::Oversized(len)));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(match Opcode::from_byte(header[4]) {
        Some(op) => Incoming::Frame(op, payload),
        None => Incoming::UnknownOpcode(header[4]),
    }))
}
