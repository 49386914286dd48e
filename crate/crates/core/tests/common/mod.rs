#![allow(dead_code)]

use kshare::config::{parse_config, SimConfig};
use kshare::settings::ProtocolConfig;
use kshare::sim::FederatedData;

/// A scenario small enough to run many times per test.
pub const SMALL: &str = r#"
seed = 7
n_gen = 80
hidden = 16

[dataset]
kind = "synthetic"
classes = 4
features = 8
per_class = 150
spread = 1.0

[partition]
scheme = "label_limit"
labels = 2
clients = 4
n_local = 60

[schedule]
rounds = 3
"#;

pub fn small_config() -> SimConfig {
    parse_config(SMALL).unwrap()
}

pub fn small() -> (SimConfig, ProtocolConfig, FederatedData) {
    let cfg = small_config();
    let data = cfg.build_data().unwrap();
    let pcfg = cfg.protocol_config(data.test.classes, data.test.feature_dim());
    (cfg, pcfg, data)
}
