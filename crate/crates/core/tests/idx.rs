use std::io::Write;
use std::path::{Path, PathBuf};

use dwf_core::data::{
    encode_idx_images, encode_idx_labels, load_idx, load_mnist_dir, parse_idx_images,
    parse_idx_labels, IdxImages,
};
use dwf_core::DwfError;

// Two 2×3 images written byte by byte, independent of the library encoder.
const IMAGES: [u8; 28] = [
    0x00, 0x00, 0x08, 0x03, // magic
    0x00, 0x00, 0x00, 0x02, // count
    0x00, 0x00, 0x00, 0x02, // rows
    0x00, 0x00, 0x00, 0x03, // cols
    0, 51, 102, 153, 204, 255, //
    255, 0, 0, 0, 0, 17,
];
const LABELS: [u8; 10] = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn fixture_parses_to_known_values() {
    let img = parse_idx_images(&IMAGES).unwrap();
    assert_eq!((img.count, img.rows, img.cols), (2, 2, 3));
    assert_eq!(img.pixels, IMAGES[16..].to_vec());
    assert_eq!(parse_idx_labels(&LABELS).unwrap(), vec![7, 3]);

    let dir = tempfile::tempdir().unwrap();
    let ds = load_idx(
        &write(dir.path(), "img", &IMAGES),
        &write(dir.path(), "lab", &LABELS),
    )
    .unwrap();
    assert_eq!((ds.len(), ds.features()), (2, 6));
    assert_eq!(ds.inputs.row(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(ds.targets.classes().unwrap(), &[7, 3]);
    assert!(ds.inputs.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn encoder_round_trip_is_byte_identical() {
    let img = parse_idx_images(&IMAGES).unwrap();
    assert_eq!(encode_idx_images(&img), IMAGES.to_vec());
    assert_eq!(encode_idx_labels(&parse_idx_labels(&LABELS).unwrap()), LABELS.to_vec());
    let made = IdxImages {
        count: 1,
        rows: 1,
        cols: 2,
        pixels: vec![9, 8],
    };
    assert_eq!(parse_idx_images(&encode_idx_images(&made)).unwrap(), made);
}

#[test]
fn malformed_files_are_rejected() {
    let mut wrong_magic = LABELS;
    wrong_magic[3] = 0x03;
    assert!(matches!(parse_idx_labels(&wrong_magic), Err(DwfError::Format(_))));
    assert!(matches!(parse_idx_images(&LABELS), Err(DwfError::Format(_))));
    assert!(matches!(parse_idx_images(&IMAGES[..25]), Err(DwfError::Length(_))));
    assert!(matches!(parse_idx_labels(&LABELS[..9]), Err(DwfError::Length(_))));

    let dir = tempfile::tempdir().unwrap();
    let one_label = [0, 0, 8, 1, 0, 0, 0, 1, 5];
    let err = load_idx(
        &write(dir.path(), "img", &IMAGES),
        &write(dir.path(), "lab", &one_label),
    )
    .unwrap_err();
    assert!(matches!(err, DwfError::Consistency(_)));
}

#[test]
fn gzip_files_are_decompressed() {
    let dir = tempfile::tempdir().unwrap();
    let gz = |bytes: &[u8]| {
        let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    };
    let plain = load_idx(
        &write(dir.path(), "i", &IMAGES),
        &write(dir.path(), "l", &LABELS),
    )
    .unwrap();
    let zipped = load_idx(
        &write(dir.path(), "i.gz", &gz(&IMAGES)),
        &write(dir.path(), "l.gz", &gz(&LABELS)),
    )
    .unwrap();
    assert_eq!(plain, zipped);
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DWF_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-labels-idx1-ubyte").is_file().then_some(dir)
}

#[test]
fn mnist_shapes_and_label_histograms() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let (train, test) = load_mnist_dir(&dir).unwrap();
    assert_eq!((train.len(), train.features()), (60_000, 784));
    assert_eq!((test.len(), test.features()), (10_000, 784));
    let hist = |c: &[usize]| {
        let mut h = [0usize; 10];
        c.iter().for_each(|&k| h[k] += 1);
        h
    };
    assert_eq!(
        hist(test.targets.classes().unwrap()),
        [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );
    assert_eq!(
        hist(train.targets.classes().unwrap()),
        [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    );
    assert!(train.inputs.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
}
