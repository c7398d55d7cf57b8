use shadowprice::*;
use rand::SeedableRng;
fn main() {
    let target: usize = std::env::var("T").ok().and_then(|v| v.parse().ok()).unwrap_or(155);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let params = instances::InstanceParams::default();
    for i in 0..200 {
        let inst = instances::random_market(&mut rng, &params);
        if i != target { continue; }
        let m = &inst.market;
        eprintln!("instance {i}: T={} d={} utility {:?}", m.horizon(), m.assets, m.utility.node(0,0).kind);
        match certify(m, &CertificationOptions::default()) {
            Ok(c) => println!("ok valid={}", c.valid),
            Err(e) => println!("err: {e}"),
        }
    }
}
