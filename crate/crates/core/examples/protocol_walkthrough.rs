//! One promotion cycle done by hand: two clients and the item server compute
//! gradients against the published model, the server rejects a payload
//! signed for an old version, aggregates the rest and promotes.
//!
//! cargo run --example protocol_walkthrough

use fedmvmf::federation::{
    decode_model, decode_payload, encode_model, encode_payload, ClientState, ItemServerState, ServerState,
    Submission,
};
use fedmvmf::model::{FeatureVector, HyperParams, InteractionRow};
use fedmvmf::optimizer::AdamConfig;

fn main() -> fedmvmf::Result<()> {
    let (n_items, d_u, d_v) = (4, 3, 2);
    let hp = HyperParams {
        k: 2,
        alpha: 4.0,
        lambda1: 0.5,
        lambda2: 1.0,
        theta: 3,
    };
    let adam = AdamConfig::default();
    let mut server = ServerState::new(hp, n_items, d_u, 42)?;

    let mut alice = ClientState::new(
        InteractionRow::new("alice", vec![(0, 1.0), (2, 1.0)], n_items)?,
        FeatureVector::new(d_u, vec![(0, 1.0), (2, 1.0)])?,
        hp.k,
    );
    let mut bob = ClientState::new(
        InteractionRow::new("bob", vec![(1, 1.0), (3, 1.0)], n_items)?,
        FeatureVector::new(d_u, vec![(1, 1.0)])?,
        hp.k,
    );
    let item_features = (0..n_items)
        .map(|j| FeatureVector::new(d_v, vec![(j % d_v, 1.0)]))
        .collect::<fedmvmf::Result<Vec<_>>>()?;
    let mut items = ItemServerState::new(item_features, d_v, hp.k)?;

    // What a client downloads: header, signature, Q then U as little-endian f64.
    let wire = encode_model(server.model());
    let model = decode_model(&wire)?;
    println!("model v{} signed {} ({} bytes)", model.version, model.signature, wire.len());

    let from_items = items.round(&model, &hp)?.expect("side information is on");
    let from_alice = alice.round(&model, &hp)?;
    println!("alice keeps p = {:?} on device", alice.p);

    // Uploads travel the same way; the server only ever sees gradients.
    let bytes = encode_payload(model.version, &from_alice);
    let (version, from_alice) = decode_payload(&bytes)?;
    println!("alice uploads {} bytes for v{version}", bytes.len());

    for p in [from_items, from_alice] {
        assert_eq!(server.submit(p), Submission::Accepted);
    }
    println!("queued {}, promoted: {}", server.queue_len(), server.pump(&adam)?);

    let from_bob = bob.round(&model, &hp)?;
    println!("bob submits: {:?}", server.submit(from_bob));
    let promoted = server.pump(&adam)?;
    println!("after bob: promoted {promoted}, model now v{}", server.model().version);

    let late = alice.round(&model, &hp)?;
    println!("a late payload for v{}: {:?}", model.version, server.submit(late));
    println!("{:?}", server.stats());
    Ok(())
}
