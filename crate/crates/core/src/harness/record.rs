use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

/// Wraps a stream and keeps a copy of every byte read from it.
///
/// Used to capture exactly what a coordinator receives from a client.
#[derive(Debug)]
pub struct RecordingStream<L> {
    inner: L,
    received: Arc<Mutex<Vec<u8>>>,
}

impl<L> RecordingStream<L> {
    pub fn new(inner: L) -> Self {
        RecordingStream { inner, received: Arc::default() }
    }

    /// Shared handle to the captured bytes.
    pub fn received(&self) -> Arc<Mutex<Vec<u8>>> {
        Arc::clone(&self.received)
    }

    pub fn into_inner(self) -> L {
        self.inner
    }
}

impl<L: Read> Read for RecordingStream<L> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.received.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl<L: Write> Write for RecordingStream<L> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.inner.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_reads_only() {
        let mut s = RecordingStream::new(io::Cursor::new(vec![1u8, 2, 3]));
        let log = s.received();
        let mut buf = [0u8; 2];
        s.read_exact(&mut buf).unwrap();
        s.write_all(&[9, 9]).unwrap();
        assert_eq!(*log.lock().unwrap(), vec![1, 2]);
    }
}
