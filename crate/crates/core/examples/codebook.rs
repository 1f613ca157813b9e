//! Builds the structured synthetic codebook, fits K-means on noisy samples
//! around it, and shows quantization and nearest-neighbour perturbation.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use unitdiff::codebook::{default_codebook, fit_kmeans};
use unitdiff::seed;

fn main() -> unitdiff::Result<()> {
    let cb = default_codebook(0)?;
    println!("K = {}, D = {}, classes = {}, min centroid gap = {:.3}", cb.len(), cb.dim(), cb.num_classes(), cb.min_centroid_gap());

    let units = vec![3, 14, 15, 92, 65];
    let v = cb.embed(&units)?;
    println!("quantize(embed({units:?})) = {:?}", cb.quantize(v.view())?);
    println!("5 nearest neighbours of unit 14: {:?}", cb.neighbours(14, 5));
    println!("knn_perturb(k = 3): {:?}", cb.knn_perturb(&units, 3, 7)?);
    println!("meta labels: {:?}", cb.meta_of(&units)?);

    // Noisy draws around every centroid, then K-means back to 100 clusters.
    let mut rng = seed::rng(1);
    let per = 20;
    let points = Array2::from_shape_fn((cb.len() * per, cb.dim()), |(i, j)| {
        cb.centroid(i / per)[j] + 0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    let fit = fit_kmeans(points.view(), cb.len(), 100, 2)?;
    println!(
        "k-means: {} iterations, objective {:.2} -> {:.2}",
        fit.objective.len(),
        fit.objective[0],
        fit.objective[fit.objective.len() - 1]
    );
    let assigned = fit.codebook.quantize(cb.centroids())?;
    let mut distinct = assigned.clone();
    distinct.sort_unstable();
    distinct.dedup();
    println!("original centroids land in {} distinct fitted clusters", distinct.len());
    println!("json header: {}", &cb.to_json()[..40]);
    Ok(())
}
