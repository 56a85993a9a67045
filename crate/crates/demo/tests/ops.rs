use airmoe_demo::{fairness_text, flop_ledger_csv, shortlist_sweep};

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn ledger_reports_ratio_against_dense_router() {
    let csv = flop_ledger_csv("air", 65536, 512, 128, 512, 4096, 256, 4).unwrap();
    assert!(csv.starts_with("label,flops\n"));
    let ratio: f64 = csv.lines().last().unwrap().strip_prefix("ratio_vs_standard,").unwrap().parse().unwrap();
    // (G + M) / E
    assert!((ratio - 640.0 / 65536.0).abs() < 1e-9, "{ratio}");
    let dense = flop_ledger_csv("standard", 65536, 512, 128, 512, 4096, 256, 4).unwrap();
    assert!(dense.ends_with("ratio_vs_standard,1\n"));
}

#[test]
fn ledger_errors_are_messages() {
    let err = flop_ledger_csv("hierarchical", 10, 3, 1, 2, 4, 8, 1).unwrap_err();
    assert!(err.contains("E mod G = 0"), "{err}");
    assert!(flop_ledger_csv("nope", 8, 1, 1, 1, 1, 1, 1).is_err());
}

#[test]
fn sweep_recall_grows_and_bound_holds() {
    let csv = shortlist_sweep(3, 64, 8, 4, 12, 128, 64).unwrap();
    let recall = column(&csv, "mass_recall");
    assert_eq!(recall.len(), 64);
    assert!(recall.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{recall:?}");
    assert!((recall[63] - 1.0).abs() < 1e-9);
    assert!(column(&csv, "bound_holds").iter().all(|&h| h == 1.0));
    let overlap = column(&csv, "overlap");
    assert!(overlap[..3].iter().all(|o| o.is_nan()));
    assert_eq!(overlap[63], 1.0);
    assert_eq!(csv, shortlist_sweep(3, 64, 8, 4, 12, 128, 64).unwrap());
}

#[test]
fn sweep_rejects_oversized_shortlist() {
    assert!(shortlist_sweep(1, 16, 4, 2, 8, 32, 17).is_err());
    assert!(shortlist_sweep(1, 16, 4, 2, 8, 32, 0).is_err());
}

#[test]
fn fairness_names_the_violation() {
    assert!(fairness_text(10, 3, 4, 2, 1).contains("E mod G = 0"));
    let ok = fairness_text(256, 16, 32, 8, 2);
    assert!(!ok.contains("FAIL"), "{ok}");
}
