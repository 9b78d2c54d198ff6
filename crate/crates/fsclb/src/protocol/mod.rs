//! Wire messages, framing, communication accounting and transports.

pub mod codec;
mod ledger;
mod messages;
mod transport;

pub use ledger::{
    fedlin_exchange_scalars, fedlin_compact_scalars, fsclb_exchange_scalars, CommLedger, Exchange,
};
pub use messages::*;
pub use transport::{InProcTransport, Session, TcpServer, TcpTransport, Transport};

/// Scalar count of any payload-carrying frame; control frames count zero.
pub fn message_volume(frame: &Frame) -> u64 {
    match frame {
        Frame::Upload(m) => m.scalar_count(),
        Frame::Download(m) => m.scalar_count(),
        Frame::FedLinUpload(m) => m.scalar_count(),
        Frame::FedLinDownload(m) => m.scalar_count(),
        Frame::Init(_) | Frame::Ack | Frame::Error(_) => 0,
    }
}
