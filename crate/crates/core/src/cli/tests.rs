use super::*;

#[test]
fn grid_flag_format() {
    assert_eq!(parse_grid("32x32x16").unwrap(), [32, 32, 16]);
    assert_eq!(parse_grid("8X9x10").unwrap(), [8, 9, 10]);
    for bad in ["32x32", "axbxc", "1x2x3x4", ""] {
        assert!(matches!(parse_grid(bad), Err(Error::InvalidArgument(_))), "{bad}");
    }
}

#[test]
fn flag_beats_config_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n": 7, "severity": 0.9}"#).unwrap();
    let (p, v) = resolve(
        &PhantomParams::default(),
        Some(&cfg),
        flags(vec![("n", Some(json!(12))), ("noise", None)]),
    )
    .unwrap();
    assert_eq!(p.n, 12);
    assert_eq!(p.severity, 0.9);
    assert_eq!(p.noise, PhantomParams::default().noise);
    assert_eq!(v["n"], json!(12));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"loss_weights": {"bce": 2.0, "focal": 1.0}}"#).unwrap();
    let err = resolve(&TrainConfig::default(), Some(&cfg), Map::new()).unwrap_err();
    assert!(err.to_string().contains("loss_weights.focal"), "{err}");
    assert_eq!(exit_code(&err), 2);

    fs::write(&cfg, r#"{"loss_weights": {"bce": 2.0}, "batch_size": 3}"#).unwrap();
    let (t, _) = resolve(&TrainConfig::default(), Some(&cfg), Map::new()).unwrap();
    assert_eq!(t.loss_weights.bce, 2.0);
    assert_eq!(t.loss_weights.dice, 1.0);
    assert_eq!(t.batch_size, Some(3));
}

#[test]
fn exit_codes() {
    assert_eq!(run(["synergyseg", "phantom", "--bogus"]), 2);
    assert_eq!(run(["synergyseg"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let out = out.to_str().unwrap();
    assert_eq!(run(["synergyseg", "phantom", "--n", "2", "--out", out]), 2);
    assert_eq!(run(["synergyseg", "phantom", "--grid", "4x4x4", "--out", out]), 2);
    let missing = dir.path().join("nope.json");
    let m = missing.to_str().unwrap();
    assert_eq!(run(["synergyseg", "fingerprint", "--manifest", m, "--out", out]), 1);
    assert_eq!(
        run(["synergyseg", "zeroshot", "--checkpoint", m, "--manifest", m, "--out", out]),
        1
    );
}

#[test]
fn svg_has_both_curves_and_metadata() {
    let h: Vec<EpochRecord> = (0..5)
        .map(|e| EpochRecord {
            epoch: e,
            train_loss: 1.0 / (e + 1) as f64,
            val_dice: e as f64 / 5.0,
            lr: 1e-3,
            perplexity: 2.0,
            stage: None,
        })
        .collect();
    let svg = training_curves_svg(&h, &json!({"tool_version": "x<y"}));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("x&lt;y"));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}
