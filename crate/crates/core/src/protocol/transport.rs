//! Frame transports: TCP streams for real deployments, an in-process
//! lockstep loopback for deterministic tests and offline verification.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};

use super::wire::Frame;
use crate::{Error, Result};

pub trait FrameTransport {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
}

/// Buffered TCP transport.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }
}

impl FrameTransport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        frame.write_to(&mut self.writer)
    }

    fn recv(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader)
    }
}

/// Two in-process endpoints sharing a pair of queues. Frames cross as encoded
/// bytes, so the loopback exercises the same serialization as TCP. Receiving
/// from an empty queue is an ordering error, not a block.
pub fn loopback_pair() -> (LoopbackEnd, LoopbackEnd) {
    let a_to_b = Arc::new(Mutex::new(VecDeque::new()));
    let b_to_a = Arc::new(Mutex::new(VecDeque::new()));
    (
        LoopbackEnd {
            outgoing: a_to_b.clone(),
            incoming: b_to_a.clone(),
        },
        LoopbackEnd {
            outgoing: b_to_a,
            incoming: a_to_b,
        },
    )
}

pub struct LoopbackEnd {
    outgoing: Arc<Mutex<VecDeque<Vec<u8>>>>,
    incoming: Arc<Mutex<VecDeque<Vec<u8>>>>,
}

impl FrameTransport for LoopbackEnd {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.outgoing
            .lock()
            .expect("loopback lock")
            .push_back(frame.encode());
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self
            .incoming
            .lock()
            .expect("loopback lock")
            .pop_front()
            .ok_or_else(|| Error::OrderViolation("receive on empty loopback queue".into()))?;
        Frame::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::Tag;

    #[test]
    fn loopback_delivers_in_order() {
        let (mut a, mut b) = loopback_pair();
        let f1 = Frame::new(Tag::Hello, [1; 16], vec![1]);
        let f2 = Frame::new(Tag::EncImage, [1; 16], vec![2]);
        a.send(&f1).unwrap();
        a.send(&f2).unwrap();
        assert_eq!(b.recv().unwrap(), f1);
        assert_eq!(b.recv().unwrap(), f2);
        assert!(matches!(b.recv(), Err(Error::OrderViolation(_))));
    }
}
