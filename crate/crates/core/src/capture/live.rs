//! Live capture boundary.
//!
//! A [`LinkReceiver`] can only receive: there is no transmit operation in
//! the trait, and the packet-socket implementation never calls `send`.

use std::io;
use std::time::{Duration, Instant};

use super::{CaptureError, FrameProducer, StopSignal};
use crate::dissect::CapturedFrame;

const POLL_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceivedFrame {
    /// Octets copied into the caller's buffer.
    pub stored: usize,
    /// Length of the frame on the wire.
    pub wire_len: usize,
}

pub trait LinkReceiver: Send {
    /// Waits up to `timeout` for one frame, copying at most `buf.len()` octets.
    fn receive(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<Option<ReceivedFrame>>;
}

pub trait LiveAdapter: Sync {
    fn open_receive_only(
        &self,
        interface: &str,
        snap_length: u32,
    ) -> Result<Box<dyn LinkReceiver>, CaptureError>;
}

pub(super) struct LiveProducer {
    receiver: Box<dyn LinkReceiver>,
    origin: Instant,
    buf: Vec<u8>,
    snap_length: u32,
}

impl LiveProducer {
    pub(super) fn new(receiver: Box<dyn LinkReceiver>, snap_length: u32) -> Self {
        Self {
            receiver,
            origin: Instant::now(),
            buf: vec![0; snap_length as usize],
            snap_length,
        }
    }
}

impl FrameProducer for LiveProducer {
    fn next_frame(&mut self, stop: &StopSignal) -> Result<Option<CapturedFrame>, String> {
        loop {
            if stop.is_set() {
                return Ok(None);
            }
            match self.receiver.receive(&mut self.buf, POLL_INTERVAL) {
                Ok(Some(r)) => {
                    let offset =
                        u64::try_from(self.origin.elapsed().as_nanos()).unwrap_or(u64::MAX);
                    let stored = r.stored.min(self.buf.len());
                    return Ok(Some(CapturedFrame::new(
                        offset,
                        u32::try_from(r.wire_len).unwrap_or(u32::MAX),
                        self.buf[..stored].to_vec(),
                        self.snap_length,
                    )));
                }
                Ok(None) => continue,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.to_string()),
            }
        }
    }
}

/// `AF_PACKET` raw socket bound to one interface (Linux).
#[derive(Debug, Clone, Copy, Default)]
pub struct PacketSocketAdapter;

#[cfg(target_os = "linux")]
mod packet_socket {
    use super::*;
    use std::ffi::CString;
    use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

    const ETH_P_ALL: u16 = 0x0003;

    pub(super) struct PacketSocket {
        fd: OwnedFd,
    }

    pub(super) fn open(interface: &str) -> Result<PacketSocket, CaptureError> {
        let name = CString::new(interface)
            .map_err(|_| CaptureError::InterfaceNotFound(interface.to_string()))?;
        // SAFETY: `name` is a valid NUL-terminated string.
        let index = unsafe { libc::if_nametoindex(name.as_ptr()) };
        if index == 0 {
            return Err(CaptureError::InterfaceNotFound(interface.to_string()));
        }
        let protocol = i32::from(ETH_P_ALL.to_be());
        // SAFETY: plain socket(2) call; the result is checked below.
        let raw = unsafe {
            libc::socket(
                libc::AF_PACKET,
                libc::SOCK_RAW | libc::SOCK_CLOEXEC,
                protocol,
            )
        };
        if raw < 0 {
            let err = io::Error::last_os_error();
            return Err(match err.raw_os_error() {
                Some(libc::EPERM) | Some(libc::EACCES) => {
                    CaptureError::PermissionDenied(interface.to_string())
                }
                _ => CaptureError::Io(err),
            });
        }
        // SAFETY: `raw` is a freshly created descriptor owned by nobody else.
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };
        // SAFETY: sockaddr_ll is plain old data; zeroed is a valid initial state.
        let mut addr: libc::sockaddr_ll = unsafe { std::mem::zeroed() };
        addr.sll_family = libc::AF_PACKET as u16;
        addr.sll_protocol = ETH_P_ALL.to_be();
        addr.sll_ifindex = index as i32;
        // SAFETY: `addr` is a properly initialised sockaddr_ll of the stated size.
        let rc = unsafe {
            libc::bind(
                fd.as_raw_fd(),
                &addr as *const libc::sockaddr_ll as *const libc::sockaddr,
                std::mem::size_of::<libc::sockaddr_ll>() as libc::socklen_t,
            )
        };
        if rc < 0 {
            return Err(CaptureError::Io(io::Error::last_os_error()));
        }
        Ok(PacketSocket { fd })
    }

    impl LinkReceiver for PacketSocket {
        fn receive(
            &mut self,
            buf: &mut [u8],
            timeout: Duration,
        ) -> io::Result<Option<ReceivedFrame>> {
            let mut pfd = libc::pollfd {
                fd: self.fd.as_raw_fd(),
                events: libc::POLLIN,
                revents: 0,
            };
            let ms = i32::try_from(timeout.as_millis()).unwrap_or(i32::MAX);
            // SAFETY: `pfd` points to one valid pollfd.
            let ready = unsafe { libc::poll(&mut pfd, 1, ms) };
            if ready < 0 {
                return Err(io::Error::last_os_error());
            }
            if ready == 0 {
                return Ok(None);
            }
            // MSG_TRUNC makes recv report the wire length while copying only
            // `buf.len()` octets into user space.
            // SAFETY: `buf` is valid for writes of `buf.len()` octets.
            let n = unsafe {
                libc::recv(
                    self.fd.as_raw_fd(),
                    buf.as_mut_ptr().cast(),
                    buf.len(),
                    libc::MSG_TRUNC,
                )
            };
            if n < 0 {
                return Err(io::Error::last_os_error());
            }
            let wire_len = n as usize;
            Ok(Some(ReceivedFrame {
                stored: wire_len.min(buf.len()),
                wire_len,
            }))
        }
    }
}

impl LiveAdapter for PacketSocketAdapter {
    #[cfg(target_os = "linux")]
    fn open_receive_only(
        &self,
        interface: &str,
        _snap_length: u32,
    ) -> Result<Box<dyn LinkReceiver>, CaptureError> {
        Ok(Box::new(packet_socket::open(interface)?))
    }

    #[cfg(not(target_os = "linux"))]
    fn open_receive_only(
        &self,
        _interface: &str,
        _snap_length: u32,
    ) -> Result<Box<dyn LinkReceiver>, CaptureError> {
        Err(CaptureError::Unsupported)
    }
}

/// Calls made against a [`MockAdapter`], in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockCall {
    Open { interface: String, snap_length: u32 },
    Receive { buffer_len: usize },
}

/// Scripted live adapter for hermetic tests. Records every call.
#[derive(Debug, Clone, Default)]
pub struct MockAdapter {
    interfaces: Vec<String>,
    frames: Vec<Vec<u8>>,
    deny: bool,
    log: std::sync::Arc<std::sync::Mutex<Vec<MockCall>>>,
}

impl MockAdapter {
    pub fn new(interface: &str, frames: Vec<Vec<u8>>) -> Self {
        Self {
            interfaces: vec![interface.to_string()],
            frames,
            ..Self::default()
        }
    }

    /// Every open fails with `PermissionDenied`.
    pub fn denying(interface: &str) -> Self {
        Self {
            interfaces: vec![interface.to_string()],
            deny: true,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

struct MockReceiver {
    frames: std::vec::IntoIter<Vec<u8>>,
    log: std::sync::Arc<std::sync::Mutex<Vec<MockCall>>>,
}

impl LinkReceiver for MockReceiver {
    fn receive(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<Option<ReceivedFrame>> {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(MockCall::Receive {
                buffer_len: buf.len(),
            });
        match self.frames.next() {
            Some(frame) => {
                let stored = frame.len().min(buf.len());
                buf[..stored].copy_from_slice(&frame[..stored]);
                Ok(Some(ReceivedFrame {
                    stored,
                    wire_len: frame.len(),
                }))
            }
            None => {
                std::thread::sleep(timeout.min(Duration::from_millis(5)));
                Ok(None)
            }
        }
    }
}

impl LiveAdapter for MockAdapter {
    fn open_receive_only(
        &self,
        interface: &str,
        snap_length: u32,
    ) -> Result<Box<dyn LinkReceiver>, CaptureError> {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(MockCall::Open {
                interface: interface.to_string(),
                snap_length,
            });
        if !self.interfaces.iter().any(|i| i == interface) {
            return Err(CaptureError::InterfaceNotFound(interface.to_string()));
        }
        if self.deny {
            return Err(CaptureError::PermissionDenied(interface.to_string()));
        }
        Ok(Box::new(MockReceiver {
            frames: self.frames.clone().into_iter(),
            log: self.log.clone(),
        }))
    }
}
