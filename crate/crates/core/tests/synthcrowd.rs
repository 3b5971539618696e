use crowd_budget::synthcrowd::{generate_dataset, generate_scene, load_dataset, save_dataset, SceneSpec};
use crowd_budget::Error;

fn scenes(spec: &SceneSpec, n: usize) -> Vec<crowd_budget::synthcrowd::CrowdScene> {
    (0..n).map(|i| generate_scene(spec, i).unwrap()).collect()
}

#[test]
fn dataset_is_a_pure_function_of_spec_and_count() {
    let spec = SceneSpec {
        height: 24,
        width: 24,
        ..SceneSpec::default()
    };
    let a = generate_dataset(&spec, 5).unwrap();
    let b = generate_dataset(&spec, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.manifest.digest(), b.manifest.digest());
}

#[test]
fn neighbouring_seeds_give_different_layouts() {
    let a = generate_scene(&SceneSpec::default(), 0).unwrap();
    let b = generate_scene(&SceneSpec { seed: 1, ..SceneSpec::default() }, 0).unwrap();
    assert_ne!(a.heads, b.heads);
}

#[test]
fn perspective_puts_more_heads_in_the_bottom_half() {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    let (mut top, mut bottom) = (0usize, 0usize);
    for s in scenes(&spec, 500) {
        for &(r, _) in &s.heads {
            if r < 16.0 {
                top += 1;
            } else {
                bottom += 1;
            }
        }
    }
    assert!(bottom > top, "bottom {bottom} top {top}");
}

#[test]
fn zone_densities_follow_the_multipliers() {
    let spec = SceneSpec {
        height: 16,
        width: 48,
        perspective_gain: 0.0,
        ..SceneSpec::default()
    };
    let k = spec.n_horizontal_zones;
    let (mut heads, mut columns) = (vec![0usize; k], vec![0usize; k]);
    for s in scenes(&spec, 500) {
        for &z in &s.zone_of_column {
            columns[z] += 1;
        }
        for &(_, c) in &s.heads {
            heads[s.zone_of_column[c as usize]] += 1;
        }
    }
    let per_column: Vec<f64> = heads
        .iter()
        .zip(&columns)
        .map(|(&h, &c)| h as f64 / c as f64)
        .collect();
    for z in 1..k {
        assert_eq!(
            spec.zone_multipliers[z] > spec.zone_multipliers[z - 1],
            per_column[z] > per_column[z - 1],
            "{per_column:?}"
        );
    }
}

#[test]
fn heads_are_uniform_across_rows_without_perspective() {
    let spec = SceneSpec {
        height: 20,
        width: 20,
        perspective_gain: 0.0,
        ..SceneSpec::default()
    };
    let mut rows = vec![0usize; 4];
    for s in scenes(&spec, 300) {
        for &(r, _) in &s.heads {
            rows[(r / 5.0) as usize] += 1;
        }
    }
    let mean = rows.iter().sum::<usize>() as f64 / 4.0;
    for &n in &rows {
        assert!((n as f64 - mean).abs() < 0.05 * mean, "{rows:?}");
    }
}

#[test]
fn save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        height: 12,
        width: 16,
        ..SceneSpec::default()
    };
    let d = generate_dataset(&spec, 4).unwrap();
    save_dataset(&d, tmp.path()).unwrap();
    assert_eq!(load_dataset(tmp.path()).unwrap(), d);
}

#[test]
fn corrupted_scene_fails_its_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate_dataset(&SceneSpec { height: 12, width: 16, ..SceneSpec::default() }, 3).unwrap();
    save_dataset(&d, tmp.path()).unwrap();
    let grid = tmp.path().join(&d.manifest.scenes[1].grid_file);
    let mut bytes = std::fs::read(&grid).unwrap();
    bytes[10] ^= 0x40;
    std::fs::write(&grid, bytes).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Checksum(_))));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Io { .. })));
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(matches!(
        generate_dataset(&SceneSpec::default(), 0),
        Err(Error::InvalidConfig(_))
    ));
}
