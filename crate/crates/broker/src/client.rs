//! Blocking client for the broker protocol.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use m2kt::packet::digest_bytes;

use crate::protocol::{read_frame, write_frame, Incoming, Opcode};
use crate::registry::PacketSummary;
use crate::{BrokerError, Result};

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(address: A) -> Result<Self> {
        let stream = TcpStream::connect(address)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Sends a raw frame and returns the response payload or the refusal.
    pub fn request(&mut self, op: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut header = (payload.len() as u32).to_le_bytes().to_vec();
        header.push(op);
        use std::io::Write;
        self.writer.write_all(&header)?;
        self.writer.write_all(payload)?;
        self.writer.flush()?;
        self.response()
    }

    fn call(&mut self, op: Opcode, payload: &[u8]) -> Result<Vec<u8>> {
        write_frame(&mut self.writer, op, payload)?;
        self.response()
    }

    fn response(&mut self) -> Result<Vec<u8>> {
        match read_frame(&mut self.reader)? {
            Some(Incoming::Frame(Opcode::Ok, payload)) => Ok(payload),
            Some(Incoming::Frame(Opcode::Err, payload)) => {
                Err(BrokerError::Refused(String::from_utf8_lossy(&payload).into_owned()))
            }
            Some(other) => Err(BrokerError::Protocol(format!("unexpected response {other:?}"))),
            None => Err(BrokerError::Protocol("connection closed".into())),
        }
    }

    /// Publishes packet bytes; returns the hex digest the broker stored them under.
    pub fn publish(&mut self, packet: &[u8]) -> Result<String> {
        let reply = self.call(Opcode::Publish, packet)?;
        String::from_utf8(reply).map_err(|_| BrokerError::Protocol("digest is not UTF-8".into()))
    }

    /// Fetches a packet and checks that its bytes hash to the digest.
    pub fn fetch(&mut self, digest: &str) -> Result<Vec<u8>> {
        let bytes = self.call(Opcode::Fetch, digest.as_bytes())?;
        if hex::encode(digest_bytes(&bytes)) != digest.to_ascii_lowercase() {
            return Err(BrokerError::Protocol("fetched bytes do not match the digest".into()));
        }
        Ok(bytes)
    }

    pub fn list(&mut self) -> Result<Vec<PacketSummary>> {
        Ok(serde_json::from_slice(&self.call(Opcode::List, &[])?)?)
    }
}
