use std::collections::HashMap;
use std::hash::Hash;

/// Plug-in mutual information estimate in nats, with the Miller-Madow
/// bias correction applied to each entropy term.
pub fn mutual_information<X: Hash + Eq + Clone, Y: Hash + Eq + Clone>(xs: &[X], ys: &[Y]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    fn entropy<K: Hash + Eq>(counts: HashMap<K, usize>, n: f64) -> f64 {
        let bins = counts.len() as f64;
        let h: f64 = counts
            .into_values()
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        h + (bins - 1.0) / (2.0 * n)
    }
    let mut cx = HashMap::new();
    let mut cy = HashMap::new();
    let mut cxy = HashMap::new();
    for (x, y) in xs.iter().zip(ys) {
        *cx.entry(x.clone()).or_insert(0) += 1;
        *cy.entry(y.clone()).or_insert(0) += 1;
        *cxy.entry((x.clone(), y.clone())).or_insert(0) += 1;
    }
    entropy(cx, n) + entropy(cy, n) - entropy(cxy, n)
}

/// Assigns each value to one of `bins` equal-mass bins (by empirical
/// quantiles of `values`).
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<u32> {
    assert!(bins >= 1);
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..bins).map(|b| sorted[(b * sorted.len() / bins).min(sorted.len() - 1)]).collect();
    values.iter().map(|v| cuts.partition_point(|c| c <= v) as u32).collect()
}

/// Pearson correlation of consecutive pairs `(x[t-1], x[t])` pooled over
/// independent series.
pub fn lag1_autocorrelation<'a>(series: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut pairs = Vec::new();
    for s in series {
        pairs.extend(s.windows(2).map(|w| (w[0], w[1])));
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}
