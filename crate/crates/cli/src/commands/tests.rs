use super::*;

#[test]
fn grid_expands_to_the_cartesian_product_in_order() {
    let g = expand_grid(&["hidden=10,25".into(), "dropout=0.2, 0.5,".into()]).unwrap();
    let flat: Vec<String> = g
        .iter()
        .map(|c| c.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";"))
        .collect();
    assert_eq!(
        flat,
        [
            "hidden=10;dropout=0.2",
            "hidden=10;dropout=0.5",
            "hidden=25;dropout=0.2",
            "hidden=25;dropout=0.5"
        ]
    );
    assert!(expand_grid(&["hidden".into()]).is_err());
    assert!(expand_grid(&["hidden=".into()]).is_err());
    assert_eq!(expand_grid(&[]).unwrap(), vec![Vec::new()]);
}

#[test]
fn par_map_keeps_input_order_and_propagates_errors() {
    let items: Vec<u64> = (0..37).collect();
    for jobs in [1, 3, 64] {
        let out = par_map(&items, jobs, |&x| Ok(x * x)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
    }
    let r = par_map(&items, 4, |&x| if x == 20 { Err(CliError::data("boom")) } else { Ok(x) });
    assert_eq!(r.unwrap_err().code(), 2);
}

fn result(variant: Variant, seed: u64, rmse: f64) -> RunResult {
    RunResult {
        variant,
        seed,
        params: 100,
        test_rmse: rmse,
        test_mae: rmse / 2.0,
        best_valid_rmse: rmse,
        best_epoch: 1,
        steps: 10,
        train_seconds: 0.5,
    }
}

#[test]
fn ablation_table_compares_each_variant_with_full() {
    let mut rs = Vec::new();
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        for (s, jitter) in [(0, -0.1), (1, 0.0), (2, 0.1)] {
            rs.push(result(v, s, 1.0 + i as f64 + jitter));
        }
    }
    let table = ablation_table(&rs);
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], "full");
    assert_eq!(&rows[0][7..], ["-", "-", "-"]);
    for row in &rows[1..] {
        let t: f64 = row[7].parse().unwrap();
        assert!(t < 0.0, "full has the lower RMSE: {row:?}");
        assert_eq!(row[9], "true");
    }
    let mean: f64 = rows[4][3].parse().unwrap();
    assert!((mean - 5.0).abs() < 1e-12);
    let sd: f64 = rows[4][4].parse().unwrap();
    assert!((sd - 0.1).abs() < 1e-12);
}
