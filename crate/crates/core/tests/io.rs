use std::path::Path;

use deformscan::io::{decode_arrays, decode_params, encode_params, load_params, load_pointcloud, parse_ply, parse_xyz, save_params, CloudFormat, RunConfig};
use deformscan::params::flatten;
use deformscan::{Error, Model, ModelConfig};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn xyz_minimal() {
    let c = parse_xyz("0 0 0\n1 2 3\n").unwrap();
    assert_eq!(c.coords(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    assert!(matches!(parse_xyz(""), Err(Error::EmptyInput(_))));
    assert!(matches!(parse_xyz("0 0 0\n1 x 3\n"), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn ply_fixture_ignores_colors() {
    let c = load_pointcloud(&fixture("colored.ply"), CloudFormat::from_path(&fixture("colored.ply"))).unwrap();
    assert_eq!(c.coords(), &[[0.0, 0.0, 0.0], [1.0, 0.5, -0.25], [-2.0, 3.0, 4.5]]);
}

#[test]
fn malformed_ply_header() {
    assert!(matches!(parse_ply("ply\nformat ascii 1.0\nelement vertex two\nend_header\n"), Err(Error::Parse { line: 3, .. })));
    assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
}

fn toy_model(seed: u64) -> Model<f64> {
    Model::init(seed, ModelConfig::toy()).unwrap()
}

#[test]
fn params_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.params");
    let m = toy_model(3);
    save_params(&path, &m).unwrap();
    let mut back = toy_model(99);
    load_params(&path, &mut back).unwrap();
    let (a, b) = (flatten(&m), flatten(&back));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(encode_params(&back), encode_params(&m));
}

#[test]
fn truncated_file_is_a_load_error() {
    let bytes = encode_params(&toy_model(1));
    for cut in [0, 7, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut m = toy_model(1);
        assert!(matches!(decode_params(&bytes[..cut], &mut m), Err(Error::Load(_))), "cut at {cut}");
    }
}

#[test]
fn wrong_version_is_a_load_error() {
    let mut bytes = encode_params(&toy_model(1));
    bytes[8] = 7;
    assert!(matches!(decode_arrays(&bytes), Err(Error::Load(_))));
}

// Walks the container by hand and swaps the two dimensions of the first
// non-square matrix, keeping the byte length intact.
#[test]
fn shape_edited_file_names_the_array() {
    let mut bytes = encode_params(&toy_model(2));
    let rd32 = |b: &[u8], p: usize| u32::from_le_bytes(b[p..p + 4].try_into().unwrap()) as usize;
    let rd64 = |b: &[u8], p: usize| u64::from_le_bytes(b[p..p + 8].try_into().unwrap()) as usize;
    let count = rd32(&bytes, 12);
    let mut pos = 16;
    let mut edited = None;
    for _ in 0..count {
        let len = rd32(&bytes, pos);
        let name = String::from_utf8(bytes[pos + 4..pos + 4 + len].to_vec()).unwrap();
        pos += 4 + len;
        let ndim = rd32(&bytes, pos);
        pos += 4;
        let dims: Vec<usize> = (0..ndim).map(|i| rd64(&bytes, pos + 8 * i)).collect();
        if ndim == 2 && dims[0] != dims[1] {
            bytes[pos..pos + 8].copy_from_slice(&(dims[1] as u64).to_le_bytes());
            bytes[pos + 8..pos + 16].copy_from_slice(&(dims[0] as u64).to_le_bytes());
            edited = Some((name, dims));
            break;
        }
        pos += 8 * ndim + 8 * dims.iter().product::<usize>();
    }
    let (name, dims) = edited.expect("model has a rectangular matrix");
    let mut m = toy_model(2);
    match decode_params(&bytes, &mut m) {
        Err(Error::ArrayShape { name: n, expected, found }) => {
            assert_eq!(n, name);
            assert_eq!(expected, dims);
            assert_eq!(found, vec![dims[1], dims[0]]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn run_config_round_trips_through_text() {
    let mut c = RunConfig::toy();
    c.seed = 42;
    c.sigma_t = 0.05;
    let back = RunConfig::parse_over(&c.to_text(), RunConfig::default()).unwrap();
    assert_eq!(back, c);
    assert!(RunConfig::parse_over("bogus = 1\n", RunConfig::toy()).is_err());
    assert!(RunConfig::parse_over("n_groups = 0\n", RunConfig::toy()).and_then(|c| c.model_config()).is_err());
}
