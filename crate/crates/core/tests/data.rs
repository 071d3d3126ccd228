//! Dataset-level checks: a pixel nearest-neighbour oracle confirms the
//! sketch domain is genuinely shifted, and the generator contract holds over
//! whole domains.

use sdvit::autodiff::{Tape, Tensor};
use sdvit::data::{generate_all, load, save, DomainDataset, NUM_CLASSES};
use sdvit::protocol::make_splits;

const K: usize = 9;
const SKETCH: usize = 2;

/// Flattened pixels of `(domain, index)` pairs as `[n, d]` in `[0, 1]`.
fn features(domains: &[DomainDataset], pairs: &[(usize, usize)]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(d, i) in pairs {
        x.extend(domains[d].image(i).iter().map(|&p| f64::from(p) / 255.0));
        y.push(domains[d].labels[i]);
    }
    (x, y)
}

/// k-NN accuracy with squared Euclidean distance; vote ties go to the
/// lowest class id.
fn knn_accuracy(train: &(Vec<f64>, Vec<usize>), test: &(Vec<f64>, Vec<usize>), dim: usize) -> f64 {
    let (tx, ty) = train;
    let n = ty.len();
    let norms: Vec<f64> = tx
        .chunks(dim)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    // [dim, n] for the query-by-train product
    let mut t = vec![0.0; dim * n];
    for (j, row) in tx.chunks(dim).enumerate() {
        for (k, &v) in row.iter().enumerate() {
            t[k * n + j] = v;
        }
    }
    let tape = Tape::inference();
    let train_t = tape.constant(Tensor::new(vec![dim, n], t).unwrap());
    let mut correct = 0;
    let (qx, qy) = test;
    for (chunk_x, chunk_y) in qx.chunks(256 * dim).zip(qy.chunks(256)) {
        let m = chunk_y.len();
        let q = tape.constant(Tensor::new(vec![m, dim], chunk_x.to_vec()).unwrap());
        let dots = q.matmul(train_t).unwrap().value();
        for (r, &label) in chunk_y.iter().enumerate() {
            let row = &dots.data()[r * n..(r + 1) * n];
            // the query norm is constant per row and drops out of the ranking
            let mut d: Vec<(f64, usize)> = row
                .iter()
                .zip(&norms)
                .map(|(dot, nn)| nn - 2.0 * dot)
                .zip(0..)
                .collect();
            d.select_nth_unstable_by(K - 1, |a, b| a.0.total_cmp(&b.0));
            let mut votes = [0usize; NUM_CLASSES];
            for &(_, j) in &d[..K] {
                votes[ty[j]] += 1;
            }
            let best = (0..NUM_CLASSES).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            correct += usize::from(best == label);
        }
    }
    correct as f64 / qy.len() as f64
}

#[test]
fn nearest_neighbour_oracle_shows_a_sketch_gap() {
    let domains = generate_all(400, 0).unwrap();
    let sizes: Vec<usize> = domains.iter().map(DomainDataset::len).collect();
    let plan = make_splits(&sizes, SKETCH, 3).unwrap();
    let dim = domains[0].image_len();
    let train = features(&domains, &plan.pooled_train());
    let val = features(&domains, &plan.pooled_val());
    let all_sketch: Vec<(usize, usize)> = (0..domains[SKETCH].len()).map(|i| (SKETCH, i)).collect();
    let sketch = features(&domains, &all_sketch);

    let in_domain = knn_accuracy(&train, &val, dim);
    let target = knn_accuracy(&train, &sketch, dim);
    println!("9-NN pixel oracle: in-domain {in_domain:.3}, sketch {target:.3}");
    assert!(in_domain > 0.85, "in-domain accuracy {in_domain}");
    assert!(target < 0.60, "sketch accuracy {target}");
}

#[test]
fn label_marginals_match_across_domains() {
    let domains = generate_all(20, 7).unwrap();
    for d in &domains {
        assert_eq!(d.class_counts(), [20; NUM_CLASSES]);
        assert_eq!(d.labels, domains[0].labels);
    }
    let again = generate_all(20, 7).unwrap();
    assert_eq!(domains, again);
    assert_ne!(domains[0].images, domains[1].images);
}

#[test]
fn every_domain_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for d in generate_all(3, 11).unwrap() {
        let path = dir.path().join(&d.domain);
        save(&d, &path).unwrap();
        assert_eq!(load(&path).unwrap(), d);
    }
}

#[test]
fn masks_cover_real_foreground() {
    for d in generate_all(10, 5).unwrap() {
        let hw = d.height * d.width;
        for i in 0..d.len() {
            let mask = d.mask(i);
            let fg = mask.iter().filter(|&&m| m).count();
            assert!(
                fg > 10 && fg < hw,
                "{} example {i}: {fg} foreground pixels",
                d.domain
            );
        }
    }
}
