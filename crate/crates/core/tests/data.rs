use wsnn::data::{
    encode_binary_images, load_binary_images, make_synthetic, parse_binary_images,
    write_binary_images, Dataset,
};

/// Accuracy of assigning each test image to the class with the closest
/// training mean.
fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.image_len();
    let mut centroids = vec![vec![0.0; n]; train.num_classes];
    let counts = train.class_counts();
    for i in 0..train.len() {
        for (c, p) in centroids[train.labels[i]].iter_mut().zip(train.image(i)) {
            *c += p / counts[train.labels[i]] as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let img = test.image(i);
            let best = (0..train.num_classes)
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f64 {
                        centroids[k]
                            .iter()
                            .zip(img)
                            .map(|(c, p)| (c - p).powi(2))
                            .sum()
                    };
                    d(a).partial_cmp(&d(b)).unwrap()
                })
                .unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn nearest_centroid_in_sanity_window() {
    let train = make_synthetic(2, 200, 16, 16, 11).unwrap();
    let test = make_synthetic(2, 200, 16, 16, 12).unwrap();
    let acc = nearest_centroid_accuracy(&train, &test);
    println!("nearest-centroid accuracy {acc:.3}");
    assert!((0.60..=0.95).contains(&acc), "{acc}");
}

#[test]
fn write_then_read_is_identity() {
    let ds = make_synthetic(3, 4, 8, 8, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    write_binary_images(&path, &ds).unwrap();
    let back = load_binary_images(&path, 1, 8, 8, 3).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.pixels, ds.pixels);
    assert_eq!(
        encode_binary_images(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn channel_major_layout() {
    // Two channels of a 1x2 image: [c0: 10, 20][c1: 30, 40].
    let ds = parse_binary_images(&[0, 10, 20, 30, 40], 2, 1, 2, 1).unwrap();
    let (t, labels) = ds.batch(&[0]).unwrap();
    assert_eq!(labels, vec![0]);
    assert_eq!(t.shape(), &[1, 2, 1, 2]);
    assert_eq!(t.at4(0, 1, 0, 0), 30.0 / 255.0);
}

#[test]
fn missing_file_is_io_error() {
    let r = load_binary_images(std::path::Path::new("/nonexistent/x.bin"), 1, 1, 1, 2);
    assert!(matches!(r, Err(wsnn::error::Error::Io(_))));
}
