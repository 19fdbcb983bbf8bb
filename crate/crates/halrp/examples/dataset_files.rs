//! Dataset file round trips and CSV import.

use std::fs;

use halrp::tasks::{
    gen_split, gen_synthetic, load_dataset, save_dataset, LabeledDataset, TaskOrder,
};

fn main() {
    let dir = std::env::temp_dir().join("halrp_dataset_example");
    fs::create_dir_all(&dir).unwrap();

    // Build a pool from a synthetic task and store it in the binary format.
    let d = gen_synthetic(4, 6, 25, 0.1, 13);
    let pool = LabeledDataset {
        inputs: d.train.inputs.clone(),
        labels: d.train.labels.clone(),
        class_count: d.class_count,
    };
    let bin_path = dir.join("pool.hdset");
    save_dataset(&bin_path, &pool).unwrap();
    let loaded = load_dataset(&bin_path).unwrap();
    assert_eq!(loaded, pool);
    println!(
        "binary round trip ok: {} samples, {} dims, {} classes",
        loaded.labels.len(),
        loaded.inputs.cols(),
        loaded.class_count
    );

    // The same loader accepts CSV rows of `label, features...`.
    let csv_path = dir.join("import.csv");
    fs::write(
        &csv_path,
        "0, 0.1, 0.9\n1, 0.8, 0.2\n1, 0.7, 0.1\n0, 0.2, 0.8\n",
    )
    .unwrap();
    let imported = load_dataset(&csv_path).unwrap();
    println!(
        "csv import ok: {} samples, labels {:?}",
        imported.labels.len(),
        imported.labels
    );

    // Class-split the binary pool into two 2-way tasks.
    let tasks = gen_split(&loaded, 2, &TaskOrder::explicit(vec![1, 0]).unwrap()).unwrap();
    for t in &tasks {
        println!(
            "task {} ({}): {} train / {} test samples",
            t.task_id,
            t.provenance,
            t.train.len(),
            t.test.len()
        );
    }
}
