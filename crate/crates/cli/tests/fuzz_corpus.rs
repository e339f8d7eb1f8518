//! Replays the checked-in fuzz seeds through the same decoders the fuzz
//! targets drive, so the seeds stay meaningful without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use ductms::io::{decode_array, encode_array};
use ductms::training::Manifest;
use ductms_cli::config::RunConfig;
use tensor::ParamStore;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn accepted(target: &str, ok: impl Fn(&[u8]) -> bool) -> Vec<String> {
    seeds(target).into_iter().filter(|(_, b)| ok(b)).map(|(n, _)| n).collect()
}

#[test]
fn checkpoint_seeds() {
    let got = accepted("checkpoint", |b| match ParamStore::from_bytes(b) {
        Ok(s) => {
            assert_eq!(ParamStore::from_bytes(&s.to_bytes()).unwrap(), s);
            true
        }
        Err(_) => false,
    });
    assert_eq!(got, ["empty", "scalar", "two_tensors"]);
}

#[test]
fn array_seeds() {
    let got = accepted("array", |b| {
        let cut = b.iter().position(|&c| c == b'\n').map_or(b.len(), |i| i + 1);
        let (side, payload) = b.split_at(cut);
        match decode_array(side, payload) {
            Ok((t, u)) => {
                let (s, p) = encode_array(&t, u);
                assert_eq!(decode_array(&s, &p).unwrap(), (t, u));
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(got, ["image_2x2", "mask_1x3", "sino_2x3"]);
}

#[test]
fn config_seeds() {
    let got = accepted("config", |b| match RunConfig::parse(std::str::from_utf8(b).unwrap()) {
        Ok(c) => {
            assert_eq!(RunConfig::parse(&serde_json::to_string(&c).unwrap()).unwrap(), c);
            true
        }
        Err(_) => false,
    });
    assert_eq!(got, ["empty", "full", "small"]);
}

#[test]
fn manifest_seeds() {
    for (name, b) in seeds("manifest") {
        let m = Manifest::parse(&b).unwrap_or_else(|e| panic!("{}: {}", name, e));
        assert_eq!(Manifest::parse(m.to_json().as_bytes()).unwrap(), m);
        let mut tampered = m.clone();
        let first = tampered.samples[0].clone();
        tampered.samples.push(first);
        assert!(Manifest::parse(tampered.to_json().as_bytes()).is_err());
    }
}
