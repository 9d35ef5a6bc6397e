use std::fs;

use hetsep::conditions::Gender;
use hetsep::corpus::{load_manifest, DomainName, Partition};
use hetsep::experiments::{build_manifests, prepare_manifest, preset, synth_corpus, ExperimentConfig, ManifestPaths};
use hetsep::wav::write_wav_i16;
use hetsep::Waveform;

#[test]
fn prepare_manifest_from_listing() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("audio");
    fs::create_dir_all(&audio).unwrap();
    let mut listing = String::from("record_id,audio_path,speaker_id,gender,language\n");
    for spk in 0..10 {
        for r in 0..2 {
            let name = format!("s{spk}r{r}");
            // 16 kHz, 4.5 s
            let samples: Vec<f64> = (0..72_000).map(|i| 0.1 * (i as f64 * 0.05 * (spk + 1) as f64).sin()).collect();
            write_wav_i16(&audio.join(format!("{name}.wav")), &Waveform::new(samples, 16_000)).unwrap();
            let gender = if spk % 2 == 0 { "female" } else { "male" };
            listing.push_str(&format!("{name},audio/{name}.wav,spk{spk},{gender},\n"));
        }
    }
    let listing_path = dir.path().join("listing.csv");
    fs::write(&listing_path, listing).unwrap();
    let out = dir.path().join("manifests");
    let set = prepare_manifest(DomainName::Wsj, &listing_path, [8, 1, 1], 3, &out).unwrap();
    assert_eq!(set.train.speakers().len(), 8);
    assert_eq!(set.val.speakers().len(), 1);
    assert_eq!(set.test.speakers().len(), 1);
    let reloaded = load_manifest(&out.join("train.jsonl")).unwrap();
    assert_eq!(reloaded.partition, Partition::Train);
    assert_eq!(reloaded.records.len(), 16);
    assert!((reloaded.records[0].duration - 4.5).abs() < 1e-9);
    assert!(reloaded.records.iter().all(|r| r.gender.is_some()));
    assert_eq!(reloaded.records.iter().filter(|r| r.gender == Some(Gender::Female)).count() % 2, 0);

    // too short for the 4 s crop
    let short = dir.path().join("short.csv");
    write_wav_i16(&audio.join("tiny.wav"), &Waveform::new(vec![0.1; 8000], 8000)).unwrap();
    let mut text = fs::read_to_string(&listing_path).unwrap();
    text.push_str("tiny,audio/tiny.wav,spk0,female,\n");
    fs::write(&short, text).unwrap();
    let err = prepare_manifest(DomainName::Wsj, &short, [8, 1, 1], 3, &dir.path().join("m2")).unwrap_err();
    assert_eq!(err.category(), "manifest");

    // a WSJ listing without gender is refused
    let nogender = dir.path().join("nogender.csv");
    fs::write(&nogender, "record_id,audio_path,speaker_id,gender,language\nx,audio/s0r0.wav,a,,\ny,audio/s1r0.wav,b,,\nz,audio/s2r0.wav,c,,\n").unwrap();
    assert!(prepare_manifest(DomainName::Wsj, &nogender, [1, 1, 1], 3, &dir.path().join("m3")).is_err());
}

#[test]
fn synthesized_corpus_feeds_a_manifest_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("tiny").unwrap();
    let toy = cfg.data.toy.take().unwrap();
    let set = synth_corpus(&toy, dir.path()).unwrap();
    assert_eq!(set.train.speakers().len(), 32);

    // the same corpus read back from disk through a manifest-based config
    cfg.data.manifests = vec![ManifestPaths {
        domain: DomainName::Toy,
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
    }];
    let cfg_path = dir.path().join("exp.toml");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&cfg_path).unwrap();
    let manifests = build_manifests(&loaded).unwrap();
    assert_eq!(manifests.len(), 3);
    assert_eq!(manifests[0].records.len(), set.train.records.len());
    assert!(manifests[0].records.iter().all(|r| std::path::Path::new(&r.audio_ref).exists()));
}

#[test]
fn config_without_data_for_a_domain_is_refused() {
    let mut cfg = preset("tiny").unwrap();
    cfg.data.toy = None;
    cfg.data.manifests = vec![ManifestPaths {
        domain: DomainName::Wsj,
        train: "a".into(),
        val: "b".into(),
        test: "c".into(),
    }];
    let err = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap_err();
    assert!(err.to_string().contains("TOY"), "{err}");
}
