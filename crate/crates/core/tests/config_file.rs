use std::path::Path;

use melflow::config::Config;

#[test]
fn shipped_desk_config_parses_to_the_documented_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/desk.toml");
    let cfg = Config::load(&path).unwrap();
    let d = Config::default();
    assert_eq!(cfg.dsp, d.dsp);
    assert_eq!(cfg.flow, d.flow);
    assert_eq!(cfg.model, d.model);
    assert_eq!(cfg.simulate.specs.len(), 2);
    assert_eq!(cfg.train.batch_size, d.train.batch_size);
    assert_eq!(cfg.train.lr, d.train.lr);
    assert!(cfg.train.manifest.ends_with("data/manifest.tsv"));
    assert!(cfg.train.manifest.starts_with(path.parent().unwrap()));
}
