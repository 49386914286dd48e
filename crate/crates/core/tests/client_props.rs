mod common;

use std::sync::Arc;

use kshare::client::{
    accuracy, client_update, client_update_traced, init_client, local_accuracy, ClientState,
    ServerBroadcast,
};
use kshare::data::{synth_blobs, ClientDataset, Dataset};
use kshare::nn::{Activation, Dense, ModelParams, Role};
use kshare::rng::rng;
use kshare::server::{broadcast, init_server};
use kshare::settings::ProtocolConfig;
use nalgebra::{DMatrix, DVector};

fn setup() -> (ProtocolConfig, Vec<ClientState>, ServerBroadcast, Dataset) {
    let (_, pcfg, data) = common::small();
    let clients = data
        .clients
        .iter()
        .map(|d| init_client(Arc::new(d.clone()), &pcfg, 7).unwrap())
        .collect();
    let b = broadcast(&init_server(&pcfg, 7).unwrap());
    (pcfg, clients, b, data.test)
}

#[test]
fn encoder_update_precedes_descriptive_loss() {
    let (mut cfg, clients, b, _) = setup();
    cfg.train.local_epochs = 2;
    cfg.train.batch_size = 16;
    let (_, _, traces) = client_update_traced(&clients[0], &b, &cfg, 3).unwrap();
    let n = clients[0].dataset.n_k();
    assert_eq!(traces.len(), 2 * n.div_ceil(16));
    for t in &traces {
        if t.size >= 2 {
            assert_eq!(t.des_encoder_version, t.cog_encoder_version + 1);
        } else {
            assert_eq!(t.des_encoder_version, t.cog_encoder_version);
        }
    }
    // The short final batch is kept.
    assert_eq!(traces.iter().filter(|t| t.epoch == 0).map(|t| t.size).sum::<usize>(), n);
    for pair in traces.windows(2) {
        assert!(pair[1].cog_encoder_version > pair[0].des_encoder_version);
    }
}

#[test]
fn upload_carries_only_the_generator() {
    let (cfg, clients, b, _) = setup();
    let (next, up) = client_update(&clients[1], &b, &cfg, 5).unwrap();
    assert_eq!(up.generator, next.generator);
    assert_eq!(up.generator.role, Role::Generator);
    let v = serde_json::to_value(&up).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["client_id", "generator", "timestamp"]);

    // No raw sample value, encoder parameter or embedding appears anywhere.
    let params: Vec<u64> = up
        .generator
        .layers()
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).map(|x| x.to_bits()))
        .collect();
    let data = &next.dataset;
    let embeddings = next.encoder.predict(&data.features).unwrap();
    let forbidden = data
        .features
        .iter()
        .chain(embeddings.iter())
        .chain(next.encoder.layers().iter().flat_map(|l| l.weight.iter()))
        .filter(|x| **x != 0.0)
        .map(|x| x.to_bits());
    for f in forbidden {
        assert!(!params.contains(&f));
    }
}

#[test]
fn interaction_count_increments_once() {
    let (cfg, clients, b, _) = setup();
    let mut s = clients[2].clone();
    for i in 0..3 {
        assert_eq!(s.interaction_count, i);
        s = client_update(&s, &b, &cfg, 10 + i).unwrap().0;
    }
    assert_eq!(s.interaction_count, 3);
}

#[test]
fn zero_epochs_only_adopts_classifier() {
    let (mut cfg, clients, _, _) = setup();
    cfg.train.local_epochs = 0;
    let mut server = init_server(&cfg, 99).unwrap();
    server.table.set(0, DVector::zeros(8), DMatrix::identity(8, 8), None);
    let b = broadcast(&server);
    let before = &clients[0];
    let (after, up) = client_update(before, &b, &cfg, 1).unwrap();
    assert_eq!(after.classifier, b.classifier);
    assert_ne!(after.classifier, before.classifier);
    assert_eq!(after.encoder, before.encoder);
    assert_eq!(after.generator, before.generator);
    assert_eq!(after.local_class_knowledge, before.local_class_knowledge);
    assert_eq!(up.generator, before.generator);
}

#[test]
fn identical_clients_give_identical_uploads() {
    let (cfg, clients, b, _) = setup();
    let twin = clients[3].clone();
    let (s1, u1) = client_update(&clients[3], &b, &cfg, 42).unwrap();
    let (s2, u2) = client_update(&twin, &b, &cfg, 42).unwrap();
    assert_eq!(u1, u2);
    assert_eq!(s1, s2);
    let (_, u3) = client_update(&twin, &b, &cfg, 43).unwrap();
    assert_ne!(u1.generator, u3.generator);
}

#[test]
fn knowledge_covers_present_classes() {
    let (cfg, clients, b, _) = setup();
    for c in &clients {
        let next = client_update(c, &b, &cfg, 8).unwrap().0;
        let keys: Vec<usize> = next.local_class_knowledge.keys().copied().collect();
        let present: Vec<usize> = c.dataset.label_set().into_iter().collect();
        assert_eq!(keys, present);
    }
}

#[test]
fn matched_table_keeps_collaborative_term_small() {
    let (_, mut cfg, _) = common::small();
    // One full batch, so the batch statistics start exactly at the table entry
    // rather than a subsample of it.
    cfg.train.batch_size = 200;
    let ds = synth_blobs(cfg.classes, cfg.feature_dim, 200, 1.0, 21).unwrap();
    let only0: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
    let cd = Arc::new(ClientDataset::from_parent(0, &ds, only0));
    let state = init_client(cd, &cfg, 3).unwrap();
    let mut server = init_server(&cfg, 3).unwrap();
    let truth = &state.local_class_knowledge[&0];
    server.table.set(0, truth.mean.clone(), truth.cov.clone(), None);
    let (next, _) = client_update(&state, &broadcast(&server), &cfg, 4).unwrap();
    assert!(
        next.stats.l_col < 0.1 * next.stats.l_con,
        "L_col {} vs L_con {}",
        next.stats.l_col,
        next.stats.l_con
    );
}

#[test]
fn random_classifier_scores_chance() {
    let (cfg, clients, _, _) = setup();
    let test = synth_blobs(4, 8, 500, 1.0, 5).unwrap();
    let mut r = rng(17);
    let mut s = clients[0].clone();
    s.classifier = ModelParams::classifier(cfg.train.embed_dim, cfg.hidden, 4, &mut r).unwrap();
    let acc = local_accuracy(&s, &test).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn oracle_classifier_scores_one_and_shifted_scores_zero() {
    // Identity encoder and a linear classifier reading the label feature.
    let n = 40;
    let classes = 4;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = DMatrix::from_fn(n, classes, |i, j| f64::from(u8::from(labels[i] == j)));
    let test = Dataset::new(x, labels, classes).unwrap();
    let enc = ModelParams::new(
        Role::Encoder,
        vec![Dense::new(DMatrix::identity(classes, classes), DVector::zeros(classes), Activation::Identity).unwrap()],
    )
    .unwrap();
    let perfect = ModelParams::new(
        Role::Classifier,
        vec![Dense::new(DMatrix::identity(classes, classes), DVector::zeros(classes), Activation::Identity).unwrap()],
    )
    .unwrap();
    assert_eq!(accuracy(&enc, &perfect, &test).unwrap(), 1.0);
    // Predict label + 1 mod C.
    let shift = DMatrix::from_fn(classes, classes, |i, j| f64::from(u8::from(i == (j + 1) % classes)));
    let wrong = ModelParams::new(
        Role::Classifier,
        vec![Dense::new(shift, DVector::zeros(classes), Activation::Identity).unwrap()],
    )
    .unwrap();
    assert_eq!(accuracy(&enc, &wrong, &test).unwrap(), 0.0);
}
