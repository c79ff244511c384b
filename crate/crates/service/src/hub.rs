//! Fan-out from the pipeline's publication stage to viewer connections.
//! Every connection owns a depth-1 mailbox that is overwritten by newer
//! frames, so a slow viewer skips frames instead of stalling publication.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, OnceLock, Weak};

use oxyfield::io::encode_png;
use oxyfield::pipeline::{FrameSink, PipelineEvent, ProcessedFrame};

use crate::protocol::{Encoding, FrameHeader, FrameMeta};

/// A processed frame with lazily encoded payloads shared by all viewers.
pub struct Published {
    pub frame: Arc<ProcessedFrame>,
    png: OnceLock<Vec<u8>>,
    rgba: OnceLock<Vec<u8>>,
}

impl Published {
    pub fn new(frame: Arc<ProcessedFrame>) -> Self {
        Self {
            frame,
            png: OnceLock::new(),
            rgba: OnceLock::new(),
        }
    }

    pub fn meta(&self, encoding: Encoding) -> FrameMeta {
        let f = &self.frame;
        FrameMeta {
            frame_id: f.frame_id,
            width: f.width as u32,
            height: f.height as u32,
            encoding,
            overlay_mode: f.overlay_mode,
            calibrated: f.calibrated(),
            warnings: f.warnings.clone(),
            timings: f.timings,
            histogram: f.summary.histogram.clone(),
            so2_mean: f.summary.mean,
            tissue_pixels: f.summary.tissue_pixels,
            config_generation: f.config_generation,
        }
    }

    pub fn payload(&self, encoding: Encoding) -> &[u8] {
        match encoding {
            Encoding::Png => self.png.get_or_init(|| {
                encode_png(&self.frame.display()).unwrap_or_else(|e| {
                    log::error!("png encoding of frame {} failed: {e}", self.frame.frame_id);
                    Vec::new()
                })
            }),
            Encoding::Rgba => self.rgba.get_or_init(|| self.frame.display().to_rgba()),
        }
    }

    /// Header plus payload, ready to send as one binary message.
    pub fn binary(&self, encoding: Encoding) -> Vec<u8> {
        let payload = self.payload(encoding);
        let f = &self.frame;
        let header = FrameHeader::new(encoding, f.frame_id, f.width as u32, f.height as u32, payload.len() as u32);
        let mut out = Vec::with_capacity(header.encode().len() + payload.len());
        out.extend_from_slice(&header.encode());
        out.extend_from_slice(payload);
        out
    }
}

/// Per-connection delivery state.
#[derive(Default)]
pub struct Mailbox {
    latest: Mutex<Option<Arc<Published>>>,
    events: Mutex<VecDeque<PipelineEvent>>,
}

impl Mailbox {
    /// Newest undelivered frame, if any.
    pub fn take_frame(&self) -> Option<Arc<Published>> {
        self.latest.lock().unwrap().take()
    }

    pub fn take_events(&self) -> Vec<PipelineEvent> {
        self.events.lock().unwrap().drain(..).collect()
    }
}

/// Registry of live connections.
#[derive(Default)]
pub struct Hub {
    mailboxes: Mutex<Vec<Weak<Mailbox>>>,
    published: Mutex<u64>,
}

impl Hub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn subscribe(&self) -> Arc<Mailbox> {
        let m = Arc::new(Mailbox::default());
        self.mailboxes.lock().unwrap().push(Arc::downgrade(&m));
        m
    }

    pub fn connections(&self) -> usize {
        let mut boxes = self.mailboxes.lock().unwrap();
        boxes.retain(|w| w.strong_count() > 0);
        boxes.len()
    }

    /// Frames handed to the hub so far.
    pub fn published(&self) -> u64 {
        *self.published.lock().unwrap()
    }

    pub fn publish(&self, frame: &Arc<ProcessedFrame>) {
        let p = Arc::new(Published::new(frame.clone()));
        let mut boxes = self.mailboxes.lock().unwrap();
        boxes.retain(|w| w.strong_count() > 0);
        for m in boxes.iter().filter_map(Weak::upgrade) {
            *m.latest.lock().unwrap() = Some(p.clone());
            if !frame.events.is_empty() {
                m.events.lock().unwrap().extend(frame.events.iter().cloned());
            }
        }
        *self.published.lock().unwrap() += 1;
    }

    pub fn broadcast_event(&self, event: PipelineEvent) {
        for m in self.mailboxes.lock().unwrap().iter().filter_map(Weak::upgrade) {
            m.events.lock().unwrap().push_back(event.clone());
        }
    }

    pub fn sink(self: &Arc<Self>) -> Box<dyn FrameSink> {
        Box::new(HubSink(self.clone()))
    }
}

struct HubSink(Arc<Hub>);

impl FrameSink for HubSink {
    fn publish(&mut self, frame: &Arc<ProcessedFrame>) {
        self.0.publish(frame);
    }
}
