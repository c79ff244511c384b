use oxyfield::pipeline::{Command, OverlayMode};
use oxyfield::reflect::RegionOfInterest;
use oxyfield_service::{
    parse_control, Action, ControlBody, ControlMessage, Encoding, FrameHeader, RectMsg, StreamMessage,
    FRAME_HEADER_LEN,
};
use proptest::prelude::*;

/// Field offsets written out by hand, independent of the encoder.
fn manual_header(enc: u16, id: u64, w: u32, h: u32, len: u32) -> Vec<u8> {
    let mut b = b"OXF1".to_vec();
    b.extend(1u16.to_le_bytes());
    b.extend(enc.to_le_bytes());
    b.extend(id.to_le_bytes());
    b.extend(w.to_le_bytes());
    b.extend(h.to_le_bytes());
    b.extend(len.to_le_bytes());
    b.extend([0u8; 4]);
    b
}

proptest! {
    #[test]
    fn header_matches_manual_layout_and_round_trips(
        png in any::<bool>(),
        id in any::<u64>(),
        w in 0u32..64,
        h in 0u32..64,
        extra in 0usize..300,
    ) {
        let (enc, len) = if png { (Encoding::Png, extra) } else { (Encoding::Rgba, (4 * w * h) as usize) };
        let hdr = FrameHeader::new(enc, id, w, h, len as u32);
        let bytes = hdr.encode();
        prop_assert_eq!(bytes.len(), FRAME_HEADER_LEN);
        prop_assert_eq!(bytes.to_vec(), manual_header(enc.code(), id, w, h, len as u32));
        let mut msg = bytes.to_vec();
        msg.extend((0..len).map(|i| i as u8));
        let (back, payload) = FrameHeader::decode(&msg).unwrap();
        prop_assert_eq!(back, hdr);
        prop_assert_eq!(payload.len(), len);
        // any length disagreement is rejected
        prop_assert!(FrameHeader::decode(&msg[..msg.len() - 1]).is_err() || len == 0);
        msg.push(0);
        prop_assert!(FrameHeader::decode(&msg).is_err());
    }

    #[test]
    fn control_messages_round_trip(id in any::<u64>(), rad in -2.0f64..2.0, cm in 0.0f64..200.0) {
        for body in [
            ControlBody::SetThreshold { rad },
            ControlBody::SetWorkingDistance { cm },
            ControlBody::Pause,
            ControlBody::RequestStats,
        ] {
            let msg = ControlMessage { id, body };
            let text = serde_json::to_string(&msg).unwrap();
            prop_assert_eq!(parse_control(&text).unwrap(), msg);
        }
    }
}

#[test]
fn bad_headers_are_rejected() {
    let good = manual_header(1, 5, 2, 2, 16);
    let mut msg = good.clone();
    msg.extend([0u8; 16]);
    assert!(FrameHeader::decode(&msg).is_ok());
    let mut bad_magic = msg.clone();
    bad_magic[0] = b'X';
    assert!(FrameHeader::decode(&bad_magic).is_err());
    let mut bad_version = msg.clone();
    bad_version[4] = 2;
    assert!(FrameHeader::decode(&bad_version).is_err());
    let mut bad_enc = msg.clone();
    bad_enc[6] = 9;
    assert!(FrameHeader::decode(&bad_enc).is_err());
    // rgba payload must be exactly 4*w*h
    let mut short_rgba = manual_header(1, 5, 2, 2, 12);
    short_rgba.extend([0u8; 12]);
    assert!(FrameHeader::decode(&short_rgba).is_err());
    assert!(FrameHeader::decode(&good[..20]).is_err());
}

#[test]
fn wire_names_are_snake_case() {
    let m = parse_control(r#"{"id":1,"type":"set_roi","rect":{"x":1,"y":2,"width":3,"height":4}}"#).unwrap();
    assert_eq!(m.body, ControlBody::SetRoi { rect: RectMsg { x: 1, y: 2, width: 3, height: 4 } });
    assert_eq!(
        m.body.action().unwrap(),
        Action::Pipeline(Command::SetRoi { roi: RegionOfInterest::new(1, 2, 3, 4) })
    );
    let m = parse_control(r#"{"id":2,"type":"set_overlay_mode","mode":"overlay"}"#).unwrap();
    assert_eq!(
        m.body.action().unwrap(),
        Action::Pipeline(Command::SetOverlayMode { mode: OverlayMode::by_name("overlay").unwrap() })
    );
    let m = parse_control(r#"{"id":3,"type":"select_source","source":"props"}"#).unwrap();
    assert_eq!(m.body.action().unwrap(), Action::SelectSource("props".into()));
    let ack = StreamMessage::Ack { id: 3, frame_id: 12 }.to_json();
    assert_eq!(ack, r#"{"type":"ack","id":3,"frame_id":12}"#);
}

#[test]
fn unparseable_messages_keep_their_id_when_possible() {
    assert_eq!(parse_control("[1,2]").unwrap_err().0, None);
    assert_eq!(parse_control(r#"{"type":"pause"}"#).unwrap_err().0, None);
    let (id, reason) = parse_control(r#"{"id":8,"type":"set_threshold"}"#).unwrap_err();
    assert_eq!(id, Some(8));
    assert!(reason.starts_with("malformed message"), "{reason}");
}
