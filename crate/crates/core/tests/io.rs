use oxyfield::calib::{load_calibration, save_calibration, synthesize_default_calibration, BandGrid, CameraProfile};
use oxyfield::cube::{CubeStage, RawSensorFrame, SpectralCube};
use oxyfield::io::*;
use oxyfield::oxy::{build_synthetic_library, fine_grid, load_library, save_library, RgbImage};
use oxyfield::pipeline::{Command, OverlayMode, Pipeline, PipelineConfig};
use oxyfield::reflect::{extract_white_reference, RegionOfInterest};
use oxyfield::sim::{load_phantom, save_phantom, ScenePhantom, Simulator};
use oxyfield::Error;
use proptest::prelude::*;

fn bits(c: &SpectralCube) -> Vec<u32> {
    c.values.iter().map(|v| v.to_bits()).collect()
}

fn arb_cube() -> impl Strategy<Value = SpectralCube> {
    (1usize..7, 1usize..7, 1usize..5, 0u8..4).prop_flat_map(|(w, h, p, tag)| {
        let n = w * h * p;
        (
            prop::collection::vec(any::<u32>(), n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(300u16..1100, p),
        )
            .prop_map(move |(vals, valid, mut wl)| {
                let stage = CubeStage::from_tag(tag).unwrap();
                let mut c = if stage.is_lens_indexed() {
                    SpectralCube::lens_indexed(w, h, stage, p)
                } else {
                    wl.sort_unstable();
                    wl.dedup();
                    let mut c = SpectralCube::lens_indexed(w, h, CubeStage::Raw, p);
                    c.stage = stage;
                    c.lenses.clear();
                    // strictly increasing, f32-exact quarter-nm wavelengths
                    c.wavelengths_nm = (0..p).map(|i| f64::from(wl[0]) + 0.25 * i as f64).collect();
                    c
                };
                c.values = vals.into_iter().map(f32::from_bits).collect();
                c.valid = valid;
                c
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cube_round_trip_is_bitwise(c in arb_cube()) {
        let bytes = encode_cube(&c).unwrap();
        let back = decode_cube(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&c));
        prop_assert_eq!(&back.valid, &c.valid);
        prop_assert_eq!(back.stage, c.stage);
        prop_assert_eq!(&back.wavelengths_nm, &c.wavelengths_nm);
        prop_assert_eq!(&back.lenses, &c.lenses);
        prop_assert_eq!(encode_cube(&back).unwrap(), bytes);
    }

    #[test]
    fn frame_round_trip_is_bitwise(
        w in 1usize..20,
        h in 1usize..20,
        depth in 8u8..=16,
        id in any::<u64>(),
        t in 0.01f32..100.0,
        seed in any::<u64>(),
    ) {
        let max = (1u32 << depth) - 1;
        let px: Vec<u16> = (0..w * h).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 17) as u32 % (max + 1)) as u16).collect();
        let f = RawSensorFrame::new(w, h, depth, px, t, id).unwrap();
        let bytes = encode_frame(&f).unwrap();
        prop_assert_eq!(bytes.len(), 30 + 2 * w * h);
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn truncation_is_a_length_mismatch(cut in 1usize..40) {
        let f = RawSensorFrame::new(4, 3, 12, vec![7; 12], 1.0, 3).unwrap();
        let bytes = encode_frame(&f).unwrap();
        let cut = cut.min(bytes.len() - 4);
        let err = decode_frame(&bytes[..bytes.len() - cut]).unwrap_err();
        let is_len = matches!(err, Error::LengthMismatch { .. });
        prop_assert!(is_len, "{}", err);
    }
}

#[test]
fn truncated_frame_reports_both_sizes() {
    let f = RawSensorFrame::new(4, 3, 12, vec![7; 12], 1.0, 3).unwrap();
    let bytes = encode_frame(&f).unwrap();
    let err = decode_frame(&bytes[..bytes.len() - 5]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("54") && msg.contains("49"), "{msg}");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.hsr");
    std::fs::write(&p, &bytes[..20]).unwrap();
    assert!(matches!(read_frame(&p), Err(Error::LengthMismatch { expected: 30, actual: 20 })));
}

#[test]
fn json_formats_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let calib = synthesize_default_calibration(&CameraProfile::s5(), &[40.0, 56.0, 80.0]).unwrap();
    let cp = dir.path().join("a.calib");
    save_calibration(&calib, &cp).unwrap();
    let back = load_calibration(&cp).unwrap();
    assert_eq!(back, calib);
    let cp2 = dir.path().join("b.calib");
    save_calibration(&back, &cp2).unwrap();
    assert_eq!(std::fs::read(&cp).unwrap(), std::fs::read(&cp2).unwrap());

    let lib = build_synthetic_library(36, &fine_grid()).unwrap();
    let lp = dir.path().join("lib.json");
    save_library(&lib, &lp).unwrap();
    let back = load_library(&lp).unwrap();
    assert_eq!((&back.wavelengths_nm, &back.levels, &back.spectra), (&lib.wavelengths_nm, &lib.levels, &lib.spectra));
    let lp2 = dir.path().join("lib2.json");
    save_library(&back, &lp2).unwrap();
    assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());

    for name in ["wedge", "resection", "props"] {
        let ph = ScenePhantom::by_name(name, 290, 275).unwrap();
        let pp = dir.path().join(format!("{name}.json"));
        save_phantom(&ph, &pp).unwrap();
        assert_eq!(load_phantom(&pp).unwrap(), ph);
    }
}

#[test]
fn white_reference_round_trip() {
    let grid = BandGrid::uniform(500.0, 600.0, 11).unwrap();
    let mut cube = SpectralCube::filled(8, 8, &grid, 900.0);
    cube.valid[3 * 64 + 9] = false;
    let white = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 4, 4), 0.9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("white.hsc");
    write_white_reference(&white, &p).unwrap();
    assert!(dir.path().join("white.json").exists());
    let back = read_white_reference(&p).unwrap();
    assert_eq!(back.spectrum, white.spectrum);
    assert_eq!(back.band_valid, white.band_valid);
    assert_eq!(back.wavelengths_nm, white.wavelengths_nm);
    assert_eq!(back.roi, white.roi);
    assert_eq!(back.frame_id, white.frame_id);
    assert_eq!(back.gauze_reflectance_factor, 0.9);
    assert_eq!(back.spectrum[0], 1000.0);
}

#[test]
fn png_export_decodes_to_same_pixels() {
    let mut img = RgbImage::new(5, 3);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = (i * 17 % 256) as u8;
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    export_png(&img, &p).unwrap();
    let back = image::open(&p).unwrap().to_rgb8();
    assert_eq!(back.dimensions(), (5, 3));
    assert_eq!(back.into_raw(), img.data);
    assert_eq!(encode_png(&img).unwrap(), std::fs::read(&p).unwrap());
}

fn small_session() -> (Pipeline, Simulator, ScenePhantom) {
    let p = CameraProfile::s5();
    let pl = Pipeline::synthetic(&p, 36).unwrap();
    let ph = ScenePhantom::by_name("resection", p.subimage_width, p.subimage_height).unwrap();
    let mut sim = Simulator::new((**pl.calibration()).clone(), (**pl.library()).clone(), ph.clone());
    sim.noise.shot_noise_scale = 1.0;
    sim.noise.read_noise_sigma_dn = 2.0;
    sim.noise.seed = 11;
    (pl, sim, ph)
}

fn script(ph: &ScenePhantom) -> Vec<(u64, Command)> {
    let g = ph.gauze.unwrap();
    vec![
        (1, Command::SetRoi { roi: RegionOfInterest::new(g.x, g.y, g.width, g.height) }),
        (3, Command::SetThreshold { rad: 0.1 }),
        (3, Command::SetColormap { name: "gray".into(), alpha: 0.8 }),
        (4, Command::SetOverlayMode { mode: OverlayMode::So2 }),
    ]
}

#[test]
fn replay_reproduces_live_maps() {
    let (mut live, sim, ph) = small_session();
    let dir = tempfile::tempdir().unwrap();
    let cfg = live.config().clone();
    let mut writer = RecordingWriter::create(
        dir.path(),
        RecordingSetup {
            calibration: live.calibration(),
            library: live.library(),
            config: &cfg,
            scenario: Some(&ph),
            seed: Some(11),
        },
    )
    .unwrap();
    let script = script(&ph);
    let mut live_maps = Vec::new();
    for id in 0..6u64 {
        let frame = sim.frame(id).unwrap();
        for (_, cmd) in script.iter().filter(|(at, _)| *at == id) {
            live.apply(cmd).unwrap();
            writer.command(cmd.clone()).unwrap();
        }
        writer.append(&frame).unwrap();
        let out = live.process_frame(&frame).unwrap();
        live_maps.push((out.so2.clone(), out.composite.clone()));
    }
    assert!(writer.command(Command::SetThreshold { rad: 9.0 }).is_err());
    let manifest = writer.finish().unwrap();
    assert_eq!(manifest.events.len(), 4);
    assert_eq!(manifest.config_snapshots.len(), 4);

    let rec = Recording::open(dir.path()).unwrap();
    assert_eq!(rec.manifest, manifest);
    assert_eq!(rec.scenario().unwrap().unwrap(), ph);
    for i in 0..rec.len() {
        assert_eq!(rec.frame(i).unwrap(), sim.frame(i as u64).unwrap());
    }
    let mut replayed = Vec::new();
    rec.replay(|f| {
        replayed.push((f.so2.clone(), f.composite.clone()));
        Ok(())
    })
    .unwrap();
    assert_eq!(replayed, live_maps);
    assert!(replayed[0].0.is_none() && replayed[1].0.is_some());

    // twice from disk gives the same again
    let mut again = Vec::new();
    Recording::open(dir.path())
        .unwrap()
        .replay(|f| {
            again.push((f.so2, f.composite));
            Ok(())
        })
        .unwrap();
    assert_eq!(again, replayed);
}

#[test]
fn manifest_invariants_are_checked() {
    let p = CameraProfile::s5();
    let cfg = PipelineConfig::for_profile(&p);
    let entry = |id: u64| FrameEntry { frame_id: id, file: format!("frames/{id:08}.hsr") };
    let snap = |a: u64, b: u64| ConfigSnapshot { from_frame: a, to_frame: b, config: cfg.clone() };
    let mut m = RecordingManifest {
        version: RECORDING_VERSION,
        profile: "s5".into(),
        calibration: CALIBRATION_NAME.into(),
        library: LIBRARY_NAME.into(),
        scenario: None,
        seed: None,
        initial_config: cfg.clone(),
        config_snapshots: vec![snap(0, 2), snap(5, 5)],
        events: vec![],
        frames: vec![entry(0), entry(2), entry(5)],
    };
    m.validate().unwrap();
    m.frames.swap(0, 1);
    assert!(m.validate().is_err());
    m.frames.swap(0, 1);
    m.config_snapshots[1] = snap(4, 5);
    assert!(m.validate().is_err());
    m.config_snapshots.pop();
    assert!(m.validate().is_err(), "frame 5 uncovered");
    m.config_snapshots = vec![snap(0, 5)];
    m.version = 2;
    assert!(matches!(m.validate(), Err(Error::UnsupportedVersion { .. })));
}

#[test]
fn recording_source_streams_frames() {
    use oxyfield::pipeline::FrameSource;
    let (live, sim, _) = small_session();
    let dir = tempfile::tempdir().unwrap();
    let mut w = RecordingWriter::create(
        dir.path(),
        RecordingSetup {
            calibration: live.calibration(),
            library: live.library(),
            config: live.config(),
            scenario: None,
            seed: None,
        },
    )
    .unwrap();
    for id in 0..2 {
        w.append(&sim.frame(id).unwrap()).unwrap();
    }
    assert!(w.append(&sim.frame(1).unwrap()).is_err(), "ids must increase");
    w.finish().unwrap();
    let mut src = RecordingSource::new(Recording::open(dir.path()).unwrap(), false);
    let ids: Vec<u64> = std::iter::from_fn(|| src.next_frame()).map(|f| f.unwrap().frame_id).collect();
    assert_eq!(ids, [0, 1]);
}
