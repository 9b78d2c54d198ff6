//! In-process and TCP transports between agents and the aggregation server.
//!
//! Both transports drive the same [`Session`] logic and update the ledger
//! from the same closed forms, so a seeded experiment produces identical
//! records over either path.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;

use super::codec::{self, decode, encode, read_frame, write_frame};
use super::ledger::{fedlin_compact_scalars, CommLedger, Exchange};
use super::messages::*;
use crate::baselines::FedLinServer;
use crate::error::{Error, Result};
use crate::server::ServerState;
use crate::spectral::DenseMatrix;

/// Server-side state for one trial.
#[derive(Debug, Clone)]
pub enum Session {
    Fsclb(ServerState),
    FedLin(FedLinServer),
}

impl Session {
    pub fn new(init: &SessionInit, theory: bool) -> Result<Self> {
        Ok(match init.algo {
            SessionAlgo::Fsclb => Session::Fsclb(ServerState::new(init.l, init.d, init.lambda, theory)?),
            SessionAlgo::FedLin => Session::FedLin(FedLinServer::new(init.d, init.lambda)?),
        })
    }

    /// Answers one request frame.
    pub fn respond(&mut self, frame: Frame) -> Result<Frame> {
        match (self, frame) {
            (Session::Fsclb(s), Frame::Upload(up)) => s.handle_upload(&up, None).map(Frame::Download),
            (Session::FedLin(s), Frame::FedLinUpload(up)) => s.handle_upload(&up).map(Frame::FedLinDownload),
            (_, other) => Err(Error::Protocol(format!(
                "unexpected frame for this session: {}",
                frame_name(&other)
            ))),
        }
    }
}

fn frame_name(f: &Frame) -> &'static str {
    match f {
        Frame::Upload(_) => "upload",
        Frame::Download(_) => "download",
        Frame::FedLinUpload(_) => "fedlin-upload",
        Frame::FedLinDownload(_) => "fedlin-download",
        Frame::Init(_) => "init",
        Frame::Ack => "ack",
        Frame::Error(_) => "error",
    }
}

fn fsclb_exchange(up: &UploadMsg) -> Exchange {
    let (l, d) = (up.l(), up.d());
    let up_scalars = up.scalar_count();
    let down_scalars = (l * d + d + l + 2) as u64;
    Exchange {
        up_scalars,
        down_scalars,
        up_bytes: codec::upload_frame_len(l, d),
        down_bytes: codec::download_frame_len(l, d),
        compact_scalars: up_scalars + down_scalars,
    }
}

fn fedlin_exchange(up: &FedLinUpload) -> Exchange {
    let d = up.d();
    Exchange {
        up_scalars: up.scalar_count(),
        down_scalars: (d * d + d + 1) as u64,
        up_bytes: codec::fedlin_upload_frame_len(d),
        down_bytes: codec::fedlin_download_frame_len(d),
        compact_scalars: fedlin_compact_scalars(d),
    }
}

pub trait Transport {
    /// Starts a fresh server session.
    fn init(&mut self, init: &SessionInit) -> Result<()>;

    /// Uploads a local increment and returns the synchronized policy.
    /// `exact_gram` is the proof-only side channel; transports that cannot
    /// carry it drop it, and it never counts toward the ledger.
    fn exchange(&mut self, up: &UploadMsg, exact_gram: Option<&DenseMatrix>) -> Result<DownloadMsg>;

    fn exchange_fedlin(&mut self, up: &FedLinUpload) -> Result<FedLinDownload>;

    fn ledger(&self) -> &CommLedger;

    /// Server state, when it lives in this process.
    fn fsclb_server(&self) -> Option<&ServerState> {
        None
    }
}

/// Synchronous, lossless, FIFO calls into a server owned by the caller.
#[derive(Debug, Default)]
pub struct InProcTransport {
    session: Option<Session>,
    theory: bool,
    ledger: CommLedger,
}

impl InProcTransport {
    pub fn new(theory: bool) -> Self {
        Self {
            session: None,
            theory,
            ledger: CommLedger::default(),
        }
    }

    fn session(&mut self) -> Result<&mut Session> {
        self.session
            .as_mut()
            .ok_or_else(|| Error::Protocol("no session: send init first".into()))
    }
}

impl Transport for InProcTransport {
    fn init(&mut self, init: &SessionInit) -> Result<()> {
        self.session = Some(Session::new(init, self.theory)?);
        self.ledger = CommLedger::default();
        Ok(())
    }

    fn exchange(&mut self, up: &UploadMsg, exact_gram: Option<&DenseMatrix>) -> Result<DownloadMsg> {
        let down = match self.session()? {
            Session::Fsclb(s) => s.handle_upload(up, exact_gram)?,
            Session::FedLin(_) => return Err(Error::Protocol("FSCLB upload in a FedLinUCB session".into())),
        };
        self.ledger.record(fsclb_exchange(up));
        Ok(down)
    }

    fn exchange_fedlin(&mut self, up: &FedLinUpload) -> Result<FedLinDownload> {
        let down = match self.session()? {
            Session::FedLin(s) => s.handle_upload(up)?,
            Session::Fsclb(_) => return Err(Error::Protocol("FedLinUCB upload in an FSCLB session".into())),
        };
        self.ledger.record(fedlin_exchange(up));
        Ok(down)
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    fn fsclb_server(&self) -> Option<&ServerState> {
        match &self.session {
            Some(Session::Fsclb(s)) => Some(s),
            _ => None,
        }
    }
}

/// Blocking request/response client, one frame per message.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    ledger: CommLedger,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            ledger: CommLedger::default(),
        })
    }

    fn call(&mut self, request: &Frame) -> Result<Frame> {
        write_frame(&mut self.writer, &encode(request))?;
        let reply = read_frame(&mut self.reader)?.ok_or_else(|| {
            Error::Transport(std::io::Error::new(
                std::io::ErrorKind::ConnectionAborted,
                "server closed the connection",
            ))
        })?;
        match decode(&reply)? {
            Frame::Error(text) => Err(Error::Protocol(format!("server: {text}"))),
            frame => Ok(frame),
        }
    }
}

impl Transport for TcpTransport {
    fn init(&mut self, init: &SessionInit) -> Result<()> {
        match self.call(&Frame::Init(init.clone()))? {
            Frame::Ack => {
                self.ledger = CommLedger::default();
                Ok(())
            }
            other => Err(Error::Protocol(format!("expected ack, got {}", frame_name(&other)))),
        }
    }

    fn exchange(&mut self, up: &UploadMsg, _exact_gram: Option<&DenseMatrix>) -> Result<DownloadMsg> {
        match self.call(&Frame::Upload(up.clone()))? {
            Frame::Download(down) => {
                self.ledger.record(fsclb_exchange(up));
                Ok(down)
            }
            other => Err(Error::Protocol(format!("expected download, got {}", frame_name(&other)))),
        }
    }

    fn exchange_fedlin(&mut self, up: &FedLinUpload) -> Result<FedLinDownload> {
        match self.call(&Frame::FedLinUpload(up.clone()))? {
            Frame::FedLinDownload(down) => {
                self.ledger.record(fedlin_exchange(up));
                Ok(down)
            }
            other => Err(Error::Protocol(format!(
                "expected fedlin download, got {}",
                frame_name(&other)
            ))),
        }
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}

/// Aggregation server speaking the framed protocol. Each connection owns
/// its own session, so concurrent trials never share server state.
pub struct TcpServer {
    listener: TcpListener,
}

impl TcpServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections forever, one handler thread each.
    pub fn serve(self) -> Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            std::thread::spawn(move || {
                if let Err(e) = serve_connection(stream) {
                    eprintln!("connection closed with error: {e}");
                }
            });
        }
        Ok(())
    }

    /// Serves exactly `n` connections in turn, then returns.
    pub fn serve_n(self, n: usize) -> Result<()> {
        for _ in 0..n {
            let (stream, _) = self.listener.accept()?;
            serve_connection(stream)?;
        }
        Ok(())
    }

    /// Runs [`serve_n`](Self::serve_n) on a background thread.
    pub fn spawn_n(self, n: usize) -> JoinHandle<Result<()>> {
        std::thread::spawn(move || self.serve_n(n))
    }
}

fn serve_connection(stream: TcpStream) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session: Option<Session> = None;
    while let Some(bytes) = read_frame(&mut reader)? {
        let reply = match decode(&bytes) {
            Ok(Frame::Init(init)) => match Session::new(&init, false) {
                Ok(s) => {
                    session = Some(s);
                    Frame::Ack
                }
                Err(e) => Frame::Error(e.to_string()),
            },
            Ok(frame) => match session.as_mut() {
                Some(s) => s.respond(frame).unwrap_or_else(|e| Frame::Error(e.to_string())),
                None => Frame::Error("no session: send init first".into()),
            },
            Err(e) => Frame::Error(e.to_string()),
        };
        write_frame(&mut writer, &encode(&reply))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::DenseVector;

    fn init(l: usize, d: usize) -> SessionInit {
        SessionInit {
            algo: SessionAlgo::Fsclb,
            l,
            d,
            lambda: 1.0,
        }
    }

    fn upload(round: u64) -> UploadMsg {
        UploadMsg {
            agent_id: 1,
            round,
            s_loc: DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            rho_loc: 0.0,
            b_loc: DenseVector::from_vec(vec![1.0, 0.0]),
        }
    }

    #[test]
    fn inproc_reply_is_handle_upload() {
        let mut t = InProcTransport::new(false);
        assert!(t.exchange(&upload(0), None).is_err());
        t.init(&init(1, 2)).unwrap();
        let mut direct = ServerState::new(1, 2, 1.0, false).unwrap();
        let expected = direct.handle_upload(&upload(0), None).unwrap();
        assert_eq!(t.exchange(&upload(0), None).unwrap(), expected);
        assert_eq!(t.ledger().switching_count, 1);
        assert_eq!(t.ledger().uploaded_scalars, 5);
        assert_eq!(t.ledger().downloaded_scalars, 7);
        assert_eq!(t.ledger().uploaded_bytes, 61);
    }

    #[test]
    fn tcp_matches_inproc() {
        let server = TcpServer::bind("127.0.0.1:0").unwrap();
        let addr = server.local_addr().unwrap();
        let handle = server.spawn_n(1);
        let mut tcp = TcpTransport::connect(addr).unwrap();
        let mut local = InProcTransport::new(false);
        tcp.init(&init(1, 2)).unwrap();
        local.init(&init(1, 2)).unwrap();
        for round in 0..5 {
            assert_eq!(
                tcp.exchange(&upload(round), None).unwrap(),
                local.exchange(&upload(round), None).unwrap()
            );
        }
        assert_eq!(tcp.ledger(), local.ledger());

        let wrong = FedLinUpload {
            agent_id: 0,
            round: 0,
            dv: DenseMatrix::zeros(2, 2),
            db: DenseVector::zeros(2),
        };
        assert!(matches!(tcp.exchange_fedlin(&wrong), Err(Error::Protocol(_))));
        drop(tcp);
        handle.join().unwrap().unwrap();
    }
}
