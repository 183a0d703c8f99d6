use dgagan::checkpoint;
use dgagan::lvol::{self, Raster, Samples, HEADER_LEN};
use dgagan::manifest::{load_cohort, write_cohort, FILE_NAME};
use dgagan::report::{fmt_metric, read_report, write_report, write_summary, INF};
use dgagan::FormatError;
use dgagan_core::eval::{summarize, ReportRow, SampleMetrics};
use dgagan_core::models::ModelVariant;
use dgagan_core::phantom::{generate_phantom_cohort, PhantomConfig};
use dgagan_core::train::{TrainConfig, Trainer};
use dgagan_core::volume::{Role, Volume};

#[test]
fn lvol_layout() {
    let r = Raster {
        extents: [1, 2, 3],
        samples: Samples::F32(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]),
    };
    let bytes = lvol::encode(&r).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 6 * 4);
    assert_eq!(&bytes[..4], b"LVOL");
    assert_eq!(bytes[4], 1);
    assert_eq!(&bytes[5..17], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(bytes[17], 0);
    assert_eq!(&bytes[HEADER_LEN + 20..], &5.5f32.to_le_bytes());
    assert_eq!(lvol::decode(&bytes).unwrap(), r);
}

#[test]
fn lvol_rejects_malformed_input() {
    let r = Raster {
        extents: [2, 2, 2],
        samples: Samples::F64((0..8).map(f64::from).collect()),
    };
    let bytes = lvol::encode(&r).unwrap();
    assert_eq!(lvol::decode(&bytes).unwrap(), r);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(lvol::decode(&bad), Err(FormatError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[5..9].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(lvol::decode(&bad), Err(FormatError::ZeroExtent(_))));
    assert!(matches!(lvol::decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(lvol::decode(&bad), Err(FormatError::Trailing(1))));
    let mut bad = bytes.clone();
    bad[17] = 9;
    assert!(matches!(lvol::decode(&bad), Err(FormatError::Dtype(9))));
    let mut bad = bytes;
    bad[5..17].copy_from_slice(&[0xff; 12]);
    assert!(lvol::decode(&bad).is_err());

    let zero = Raster {
        extents: [0, 2, 2],
        samples: Samples::F32(vec![]),
    };
    assert!(matches!(lvol::encode(&zero), Err(FormatError::ZeroExtent(_))));
}

#[test]
fn volume_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.lvol");
    let v = Volume::from_fn([3, 4, 5], Role::Modality, |z, y, x| (z * 100 + y * 10 + x) as f32 * 0.25).unwrap();
    lvol::write_volume(&path, &v).unwrap();
    assert_eq!(lvol::read_volume(&path, Role::Modality).unwrap(), v);
    let missing = dir.path().join("absent.lvol");
    let err = lvol::read_volume(&missing, Role::Modality).unwrap_err();
    assert!(err.to_string().contains("absent.lvol"));
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = TrainConfig::desk(3);
    cfg.epochs = 4;
    let mut t = Trainer::new(ModelVariant::Cfsagan, cfg, 2).unwrap();
    t.epochs_done = 1;
    let bytes = checkpoint::encode(&t).unwrap();
    assert_eq!(&bytes[..4], b"LCKP");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.lckp");
    checkpoint::save(&path, &t).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.variant(), ModelVariant::Cfsagan);
    assert_eq!((back.fold, back.epochs_done), (2, 1));
    assert_eq!(back.config, t.config);
    assert_eq!(back.models.generator.params, t.models.generator.params);
    assert_eq!(
        back.models.discriminator.unwrap().params,
        t.models.discriminator.unwrap().params
    );
    let mut bad = bytes;
    bad[0] = b'Q';
    assert!(checkpoint::decode(&bad).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_phantom_cohort(&PhantomConfig::new(2, [16, 18, 20], 5)).unwrap();
    let manifest = write_cohort(dir.path(), &cohort, &[1, 0], 2, 5).unwrap();
    assert_eq!(manifest.fold_assignments(), vec![1, 0]);
    let (read, back) = load_cohort(&dir.path().join(FILE_NAME)).unwrap();
    assert_eq!(read, manifest);
    assert_eq!(back, cohort);
}

fn row(v: &str, fold: usize, roi: f64) -> ReportRow {
    ReportRow {
        variant: v.into(),
        fold,
        sample: format!("subject-{fold}-t0"),
        metrics: SampleMetrics {
            psnr_whole: 20.0,
            ssim_whole: 0.75,
            psnr_roi: roi,
        },
    }
}

#[test]
fn infinite_psnr_is_written_as_inf() {
    assert_eq!(fmt_metric(f64::INFINITY), INF);
    assert_eq!(fmt_metric(12.5), "12.5");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report(&path, &[row("unet", 0, f64::INFINITY), row("unet", 1, 11.0)]).unwrap();
    let rows = read_report(&path).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][5], "inf");
    assert_eq!(rows[1][..6], ["unet", "1", "subject-1-t0", "20", "0.75", "11"]);
}

#[test]
fn summary_uses_plus_minus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_summary(&path, &summarize(&[row("dgagan", 0, 10.0), row("dgagan", 1, 12.0)])).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("dgagan,0,1,"));
    assert!(lines[1].contains("10.0000 ± 0.0000"));
    assert!(lines[3].starts_with("dgagan,all,2,"));
    assert!(lines[3].contains("11.0000 ± 1.0000"));
}
