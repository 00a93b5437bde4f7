use vlbridge::config::Config;
use vlbridge::data::generate_corpus;
use vlbridge::eval::{eval_itm, itm_pair_logits, RECALL_CANDIDATES};
use vlbridge::params::ParamStore;
use vlbridge::Tensor;

#[test]
fn untrained_model_is_at_chance() {
    let config = Config::toy();
    let corpus = generate_corpus(72, &config.model, 8).unwrap();
    let params = ParamStore::init(&config.model, 7);
    let r = eval_itm(&params, &config.model, &corpus, 1, 1000, 20).unwrap();
    assert_eq!((r.items, r.positives), (1000, 500));
    assert!((0.45..=0.55).contains(&r.accuracy), "accuracy {}", r.accuracy);
    assert_eq!(r.recall_queries, 20);
    assert!((0.0..=1.0).contains(&r.recall_at_1));
}

#[test]
fn forced_positive_head_scores_the_positive_fraction() {
    let config = Config::toy();
    let corpus = generate_corpus(40, &config.model, 8).unwrap();
    let mut params = ParamStore::init(&config.model, 7);
    let w = params.get("heads.itm.weight").unwrap().shape().to_vec();
    params.insert("heads.itm.weight", Tensor::zeros(&w));
    params.insert("heads.itm.bias", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let rec = &corpus.records[0];
    let (l0, l1) = itm_pair_logits(&params, &config.model, &rec.ids, &rec.image).unwrap();
    assert!(l1 > l0);
    for items in [10, 101] {
        let r = eval_itm(&params, &config.model, &corpus, 3, items, 5).unwrap();
        assert_eq!(r.positives, items / 2);
        assert_eq!(r.accuracy, r.positives as f64 / items as f64);
        // Every candidate ties, and a hit needs a strict maximum.
        assert_eq!(r.recall_at_1, 0.0);
    }
    assert_eq!(RECALL_CANDIDATES, 8);
}

#[test]
fn evaluation_is_deterministic_and_validates_inputs() {
    let config = Config::toy();
    let corpus = generate_corpus(36, &config.model, 8).unwrap();
    let params = ParamStore::init(&config.model, 7);
    let a = eval_itm(&params, &config.model, &corpus, 5, 40, 4).unwrap();
    let b = eval_itm(&params, &config.model, &corpus, 5, 40, 4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(eval_itm(&params, &config.model, &corpus, 5, 0, 4).is_err());
}
