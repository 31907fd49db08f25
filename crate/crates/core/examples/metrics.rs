//! Micro-averaged Dice and IoU over a handful of hand-made maps, and the
//! effect of merging shard tallies.

use blazeneo::data::ClassMap;
use blazeneo::metrics::ConfusionTallies;

fn main() -> blazeneo::Result<()> {
    // labels: 0 background, 1 non-neoplastic, 2 neoplastic, 3 undefined
    let truth = [
        ClassMap::new(2, 4, vec![0, 2, 2, 0, 0, 2, 2, 0]),
        ClassMap::new(2, 4, vec![1, 1, 0, 3, 1, 1, 0, 3]),
    ];
    let pred = [
        ClassMap::new(2, 4, vec![0, 2, 2, 2, 0, 1, 2, 0]),
        ClassMap::new(2, 4, vec![1, 0, 0, 2, 1, 1, 0, 0]),
    ];

    let mut shards = Vec::new();
    for (p, g) in pred.iter().zip(&truth) {
        let mut t = ConfusionTallies::default();
        t.accumulate(p, g)?;
        println!("image: {:?}", t);
        shards.push(t);
    }
    let mut pooled = ConfusionTallies::default();
    for s in &shards {
        pooled.merge(s);
    }
    print!("{}", pooled.report().to_kv_text());
    Ok(())
}
