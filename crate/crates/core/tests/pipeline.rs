use ddsindy::dataset::{read_csv, split, write_csv, SplitSpec};
use ddsindy::identify::{dd_sindy, parse_model, reconstruction_error, write_model};
use ddsindy::presets::preset;
use ddsindy::simulate::benchmark;

#[test]
fn csv_round_trip_keeps_history_and_samples() {
    let data = benchmark("logistic_re", &Default::default()).unwrap().generate().unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.times(), data.times());
    assert_eq!(back.states(), data.states());
    assert_eq!(back.history().map(|h| h.times().to_vec()), data.history().map(|h| h.times().to_vec()));
}

#[test]
fn ricker_simple_recovers_linear_decay() {
    let b = benchmark("ricker_simple", &Default::default()).unwrap();
    let data = b.generate().unwrap();
    let (train, val) = split(&data, SplitSpec::new(b.recipe.train_fraction).unwrap()).unwrap();
    let p = preset("ricker_simple", None).unwrap();
    let (model, _) = dd_sindy(&train, &p.kinds, &p.spec, p.discretization, &p.solver).unwrap();
    assert!((model.coefficient(0, "x1").unwrap() + 1.0).abs() < 1e-2);
    assert!(reconstruction_error(&model, &train, &val).unwrap().val < 1e-3);
}

#[test]
fn written_model_parses_to_the_same_predictions() {
    let data = benchmark("logistic_re", &Default::default()).unwrap().generate().unwrap();
    let p = preset("logistic_re", None).unwrap();
    let (model, _) = dd_sindy(&data, &p.kinds, &p.spec, p.discretization, &p.solver).unwrap();
    let back = parse_model(&write_model(&model)).unwrap();
    let (_, a) = model.predict(&data).unwrap();
    let (_, b) = back.predict(&data).unwrap();
    assert!((a - b).amax() < 1e-12);
}
