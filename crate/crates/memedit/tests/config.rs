use memedit::config::{ConfigError, Overrides, RunConfig};

#[test]
fn empty_file_gives_defaults_with_a_stable_digest() {
    let a = RunConfig::from_toml("").unwrap();
    assert_eq!(a, RunConfig::default());
    assert_eq!(a.digest(), RunConfig::from_toml("").unwrap().digest());
    assert_eq!(a.digest().len(), 64);
    assert_eq!(a.edit.epsilon, 1.0);
    assert_eq!(a.eval.schedule, vec![1, 10, 20, 50, 100]);
}

#[test]
fn digest_ignores_key_order_and_output_root() {
    let a = RunConfig::from_toml("seed = 3\n[edit]\nmethod = \"codebook\"\nepsilon = 5.0\n").unwrap();
    let b = RunConfig::from_toml("[edit]\nepsilon = 5.0\nmethod = \"codebook\"\n").unwrap();
    let b = b.with_overrides(&Overrides { seed: Some(3), ..Overrides::default() }).unwrap();
    assert_eq!(a.digest(), b.digest());
    let moved = a.clone().with_overrides(&Overrides { out_dir: Some("/elsewhere".into()), ..Overrides::default() }).unwrap();
    assert_eq!(a.digest(), moved.digest());
    assert_ne!(a.digest(), RunConfig::default().digest());
}

#[test]
fn flags_override_file_values() {
    let file = RunConfig::from_toml("[edit]\nmethod = \"codebook\"\nepsilon = 1.0\n").unwrap();
    let o = Overrides { epsilon: Some(20.0), ..Overrides::default() };
    let c = file.with_overrides(&o).unwrap();
    assert_eq!(c.edit.epsilon, 20.0);
    assert_eq!(c.edit_plan().unwrap().epsilon, 20.0);
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let err = RunConfig::from_toml("[edit]\nepsilonn = 2.0\n").unwrap_err();
    assert!(matches!(err, ConfigError::Parse(_)));
    assert!(err.to_string().contains("epsilonn"), "{err}");
    assert!(RunConfig::from_toml("colour = 1\n").is_err());
}

#[test]
fn type_mismatches_and_constraint_violations_are_rejected() {
    assert!(matches!(RunConfig::from_toml("seed = \"zero\"\n"), Err(ConfigError::Parse(_))));
    let neg = RunConfig::from_toml("[edit]\nmethod = \"codebook\"\nepsilon = -1.0\n").unwrap_err();
    assert!(matches!(neg, ConfigError::Invalid(_)), "{neg}");
    assert!(RunConfig::from_toml("[edit]\nmethod = \"mend\"\n").is_err());
    assert!(RunConfig::from_toml("[eval]\nschedule = [10, 1]\n").is_err());
    assert!(RunConfig::from_toml("[edit]\nlayer = 9\n").is_err());
    assert!(RunConfig::from_toml("[edit]\non_failure = \"panic\"\n").is_err());
}

#[test]
fn method_defaults_pick_their_layers() {
    let c = RunConfig::from_toml("[edit]\nmethod = \"batched\"\n").unwrap();
    let p = c.edit_plan().unwrap();
    assert_eq!((p.first_layer, p.last_layer), (0, 2));
    let c = RunConfig::from_toml("[edit]\nmethod = \"codebook\"\n").unwrap();
    assert_eq!(c.edit_plan().unwrap().first_layer, 3);
    assert_eq!(RunConfig::default().edit_plan().unwrap().first_layer, 1);
}

#[test]
fn pretrain_digest_ignores_edit_settings() {
    let a = RunConfig::default();
    let b = a.clone().with_overrides(&Overrides { method: Some("codebook".into()), ..Overrides::default() }).unwrap();
    assert_eq!(a.pretrain_digest(), b.pretrain_digest());
    let c = a.clone().with_overrides(&Overrides { steps: Some(5), ..Overrides::default() }).unwrap();
    assert_ne!(a.pretrain_digest(), c.pretrain_digest());
}

#[test]
fn canonical_text_round_trips() {
    let c = RunConfig::from_toml("seed = 7\n[diagnostics]\nridge = 0.5\n").unwrap();
    assert_eq!(RunConfig::from_toml(&c.canonical()).unwrap(), c);
}
