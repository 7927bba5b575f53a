use std::time::{Duration, Instant};

use quadcal::model::{Model, ModelError};
use quadcal_cli::protocol::SubprocessModel;

const BIN: &str = env!("CARGO_BIN_EXE_quadcal");

fn serve(kind: &str) -> Vec<String> {
    vec![BIN.into(), "serve-model".into(), kind.into()]
}

fn spawn(command: Vec<String>, dim: usize, timeout_s: f64, retries: usize) -> SubprocessModel {
    SubprocessModel::spawn(command, dim, None, Duration::from_secs_f64(timeout_s), retries).unwrap()
}

#[test]
fn echo_round_trips_batches() {
    let m = spawn(serve("echo"), 3, 10.0, 0);
    assert_eq!(m.output_dim(), 3);
    let points = vec![vec![0.1, 0.2, 0.3], vec![1.0 / 3.0, -2.5e-300, 7.0]];
    assert_eq!(m.evaluate_batch(&points).unwrap(), points);
    assert_eq!(m.evaluate(&[4.0, 5.0, 6.0]).unwrap(), vec![4.0, 5.0, 6.0]);
    assert!(m.evaluate_batch(&[]).unwrap().is_empty());
}

#[test]
fn wrong_input_dimension_is_rejected_before_sending() {
    let m = spawn(serve("echo"), 2, 10.0, 0);
    assert!(matches!(
        m.evaluate_batch(&[vec![0.0, 0.0], vec![1.0]]),
        Err(ModelError::InputDim { index: 1, .. })
    ));
}

#[test]
fn null_outputs_are_non_finite() {
    let m = spawn(serve("nan"), 2, 10.0, 0);
    match m.evaluate_batch(&[vec![0.5, 0.5]]) {
        Err(ModelError::NonFinite { index }) => assert_eq!(index, 0),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn hung_process_times_out() {
    let m = spawn(serve("hang"), 1, 0.5, 1);
    let start = Instant::now();
    let err = m.evaluate_batch(&[vec![0.0]]).unwrap_err();
    assert!(start.elapsed() < Duration::from_secs(10));
    let text = err.to_string();
    assert!(text.contains("no response"), "{text}");
    assert!(text.contains("2 attempts"), "{text}");
}

#[test]
fn crashing_process_fails_after_retries() {
    let m = spawn(serve("crash"), 1, 10.0, 2);
    let text = m.evaluate_batch(&[vec![0.0]]).unwrap_err().to_string();
    assert!(text.contains("exited"), "{text}");
    assert!(text.contains("3 attempts"), "{text}");
}

#[test]
fn crash_is_recovered_by_restart() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("crashed");
    let script = format!(
        "if [ -e '{m}' ]; then exec '{b}' serve-model echo; else touch '{m}'; exec '{b}' serve-model crash; fi",
        m = marker.display(),
        b = BIN
    );
    let m = spawn(vec!["sh".into(), "-c".into(), script], 2, 10.0, 1);
    assert_eq!(m.evaluate_batch(&[vec![0.25, 0.75]]).unwrap(), vec![vec![0.25, 0.75]]);
    assert!(marker.exists());
}

#[test]
fn missing_executable_is_a_spawn_error() {
    let r = SubprocessModel::spawn(vec!["/nonexistent/model".into()], 1, None, Duration::from_secs(1), 0);
    assert!(r.is_err());
}

#[test]
fn handshake_dimension_is_checked() {
    let r = SubprocessModel::spawn(serve("echo"), 2, Some(5), Duration::from_secs(10), 0);
    assert!(r.is_err());
}
