//! WebSocket server: one thread accepting, one thread per viewer.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message, WebSocket};

use oxyfield::pipeline::{
    run_stream, CommandOutcome, FrameSource, Pipeline, PipelineEvent, StreamHandle, StreamOptions,
};

use crate::error::Result;
use crate::hub::{Hub, Mailbox};
use crate::protocol::{parse_control, Action, Encoding, StreamMessage, STREAM_PATH};

/// Poll interval of connection threads; bounds control and frame latency.
const TICK: Duration = Duration::from_millis(5);

pub type SourceResolver = Arc<dyn Fn(&str) -> std::result::Result<Box<dyn FrameSource>, String> + Send + Sync>;

#[derive(Clone)]
pub struct ServiceOptions {
    /// Payload encoding unless the viewer asks otherwise with `?encoding=`.
    pub default_encoding: Encoding,
    /// Maps SelectSource names to frame sources; `None` rejects switching.
    pub resolver: Option<SourceResolver>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            default_encoding: Encoding::Png,
            resolver: None,
        }
    }
}

/// Running server.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{}", self.addr, STREAM_PATH)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

/// Accept viewers on `bind` and connect them to a running stream whose
/// frames are published into `hub`.
pub fn serve(bind: &str, stream: Arc<StreamHandle>, hub: Arc<Hub>, opts: ServiceOptions) -> Result<ServiceHandle> {
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let stop = stop.clone();
        thread::Builder::new().name("oxy-accept".into()).spawn(move || {
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((sock, peer)) => {
                        let ctx = Connection {
                            stream: stream.clone(),
                            hub: hub.clone(),
                            opts: opts.clone(),
                            stop: stop.clone(),
                        };
                        let spawned = thread::Builder::new()
                            .name(format!("oxy-viewer-{peer}"))
                            .spawn(move || {
                                if let Err(e) = ctx.run(sock) {
                                    log::info!("viewer {peer} closed: {e}");
                                }
                            });
                        match spawned {
                            Ok(t) => conns.push(t),
                            Err(e) => log::error!("cannot start viewer thread: {e}"),
                        }
                        conns.retain(|t| !t.is_finished());
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        log::error!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
            for t in conns {
                let _ = t.join();
            }
        })?
    };
    Ok(ServiceHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

/// Pipeline stream plus server, wired together.
pub struct LiveService {
    pub stream: Arc<StreamHandle>,
    pub hub: Arc<Hub>,
    pub server: ServiceHandle,
}

impl LiveService {
    pub fn start(
        source: Box<dyn FrameSource>,
        pipeline: Pipeline,
        stream_opts: StreamOptions,
        bind: &str,
        opts: ServiceOptions,
    ) -> Result<Self> {
        let hub = Hub::new();
        let stream = Arc::new(run_stream(source, pipeline, stream_opts, vec![hub.sink()]));
        let server = serve(bind, stream.clone(), hub.clone(), opts)?;
        Ok(Self { stream, hub, server })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn stop(self) {
        self.server.stop();
        self.server.join();
        self.stream.stop();
    }
}

struct Connection {
    stream: Arc<StreamHandle>,
    hub: Arc<Hub>,
    opts: ServiceOptions,
    stop: Arc<AtomicBool>,
}

enum Pending {
    Command(u64, Receiver<CommandOutcome>),
    Source(u64, String, Receiver<u64>),
}

fn send_text(ws: &mut WebSocket<TcpStream>, m: &StreamMessage) -> Result<()> {
    ws.send(Message::text(m.to_json()))?;
    Ok(())
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

impl Connection {
    fn run(self, sock: TcpStream) -> Result<()> {
        sock.set_nonblocking(false)?;
        sock.set_nodelay(true)?;
        let mut encoding = self.opts.default_encoding;
        let mut path = String::new();
        let mut ws = tungstenite::accept_hdr(sock, |req: &Request, resp: Response| {
            path = req.uri().path().to_string();
            if path != STREAM_PATH {
                let mut err = ErrorResponse::new(Some(format!("no endpoint at {path}")));
                *err.status_mut() = StatusCode::NOT_FOUND;
                return Err(err);
            }
            if let Some(q) = req.uri().query() {
                for (k, v) in q.split('&').filter_map(|kv| kv.split_once('=')) {
                    if k == "encoding" {
                        if let Some(e) = Encoding::by_name(v) {
                            encoding = e;
                        }
                    }
                }
            }
            Ok(resp)
        })
        .map_err(|e| crate::error::ServiceError::Framing(format!("handshake failed: {e}")))?;
        ws.get_ref().set_read_timeout(Some(TICK))?;
        let mailbox = self.hub.subscribe();
        send_text(&mut ws, &StreamMessage::Hello { path, encoding })?;

        let mut pending: Vec<Pending> = Vec::new();
        let mut last_sent: Option<u64> = None;
        loop {
            if self.stop.load(Ordering::SeqCst) {
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(());
            }
            match ws.read() {
                Ok(Message::Text(t)) => self.on_control(&mut ws, t.as_str(), &mut pending)?,
                Ok(Message::Binary(_)) => {
                    // viewers never send binary data
                    let _ = ws.close(None);
                    return Err(crate::error::ServiceError::Framing("unexpected binary message".into()));
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
            self.resolve_pending(&mut ws, &mut pending)?;
            self.deliver(&mut ws, &mailbox, encoding, &mut last_sent)?;
        }
    }

    fn on_control(&self, ws: &mut WebSocket<TcpStream>, text: &str, pending: &mut Vec<Pending>) -> Result<()> {
        let msg = match parse_control(text) {
            Ok(m) => m,
            Err((id, reason)) => return send_text(ws, &StreamMessage::Nack { id, reason }),
        };
        let id = msg.id;
        match msg.body.action() {
            Err(reason) => send_text(ws, &StreamMessage::Nack { id: Some(id), reason }),
            Ok(Action::Pipeline(cmd)) => {
                pending.push(Pending::Command(id, self.stream.send(cmd)));
                Ok(())
            }
            Ok(Action::SelectSource(name)) => match &self.opts.resolver {
                None => send_text(ws, &StreamMessage::Nack {
                    id: Some(id),
                    reason: "source switching is not enabled".into(),
                }),
                Some(resolve) => match resolve(&name) {
                    Ok(src) => {
                        let label = src.name();
                        pending.push(Pending::Source(id, label, self.stream.select_source(src)));
                        Ok(())
                    }
                    Err(reason) => send_text(ws, &StreamMessage::Nack { id: Some(id), reason }),
                },
            },
            Ok(Action::RequestStats) => {
                let stats = self.stream.stats();
                send_text(ws, &StreamMessage::Stats { stats })?;
                let frame_id = self.stream.frames_in();
                send_text(ws, &StreamMessage::Ack { id, frame_id })
            }
        }
    }

    fn resolve_pending(&self, ws: &mut WebSocket<TcpStream>, pending: &mut Vec<Pending>) -> Result<()> {
        let mut i = 0;
        while i < pending.len() {
            let reply = match &pending[i] {
                Pending::Command(id, rx) => match rx.try_recv() {
                    Ok(CommandOutcome::Ack { frame_id }) => Some(StreamMessage::Ack { id: *id, frame_id }),
                    Ok(CommandOutcome::Nack { reason }) => Some(StreamMessage::Nack { id: Some(*id), reason }),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => Some(StreamMessage::Nack {
                        id: Some(*id),
                        reason: "stream ended".into(),
                    }),
                },
                Pending::Source(id, name, rx) => match rx.try_recv() {
                    Ok(frame_id) => {
                        self.hub.broadcast_event(PipelineEvent::SourceChanged { name: name.clone() });
                        Some(StreamMessage::Ack { id: *id, frame_id })
                    }
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => Some(StreamMessage::Nack {
                        id: Some(*id),
                        reason: "source switch superseded or stream ended".into(),
                    }),
                },
            };
            match reply {
                Some(m) => {
                    pending.swap_remove(i);
                    send_text(ws, &m)?;
                }
                None => i += 1,
            }
        }
        Ok(())
    }

    fn deliver(
        &self,
        ws: &mut WebSocket<TcpStream>,
        mailbox: &Mailbox,
        encoding: Encoding,
        last_sent: &mut Option<u64>,
    ) -> Result<()> {
        for event in mailbox.take_events() {
            send_text(ws, &StreamMessage::Event { event })?;
        }
        if let Some(p) = mailbox.take_frame() {
            if last_sent.is_none_or(|l| p.frame.frame_id > l) {
                send_text(ws, &StreamMessage::Frame(p.meta(encoding)))?;
                ws.send(Message::binary(p.binary(encoding)))?;
                *last_sent = Some(p.frame.frame_id);
            }
        }
        Ok(())
    }
}
