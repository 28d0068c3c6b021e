//! Every runnable example doubles as a test.

mod generate_corpus {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/generate_corpus.rs"));
}

mod gradient_check {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradient_check.rs"));
}

mod pretrain_proxy {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/pretrain_proxy.rs"));
}

mod probe_protocols {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/probe_protocols.rs"));
}

mod gap_report {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gap_report.rs"));
}

mod experiment_cell {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/experiment_cell.rs"));
}

#[test]
fn generate_corpus_example_runs() {
    generate_corpus::run_example().expect("corpus example should run");
}

#[test]
fn gradient_check_example_runs() {
    gradient_check::run_example().expect("gradient check example should run");
}

#[test]
fn pretrain_proxy_example_runs() {
    pretrain_proxy::run_example().expect("pretraining example should run");
}

#[test]
fn probe_protocols_example_runs() {
    probe_protocols::run_example().expect("probe example should run");
}

#[test]
fn gap_report_example_runs() {
    gap_report::run_example().expect("report example should run");
}

#[test]
fn experiment_cell_example_runs() {
    experiment_cell::run_example().expect("experiment cell example should run");
}
