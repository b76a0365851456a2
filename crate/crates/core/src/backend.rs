//! The interface between a searcher and whatever trains and scores networks.

use crate::error::Result;

/// Trains and evaluates (configuration, weight set) pairs.
///
/// Configurations are addressed by their [`Catalog`](crate::search_space::Catalog)
/// id, weight sets by model index. Every searcher (balanced mixture, SPOS,
/// Boltzmann exploration, MCTS, brute force) drives a backend through this
/// trait only, so the surrogate table and the trainable CNN are
/// interchangeable.
pub trait Backend {
    fn num_configs(&self) -> usize;

    fn num_models(&self) -> usize;

    /// One training iteration of configuration `config` on weight set
    /// `model`. `step`/`total_steps` drive learning-rate schedules. Returns
    /// the training loss when the backend has one.
    fn train(
        &mut self,
        config: usize,
        model: usize,
        step: usize,
        total_steps: usize,
    ) -> Result<Option<f64>>;

    /// Accuracy on one validation minibatch; feeds the accuracy averages and
    /// tree rewards during search.
    fn validate_minibatch(&mut self, config: usize, model: usize) -> Result<f64>;

    /// Accuracy on the whole validation split; used for final selection.
    fn evaluate_full(&mut self, config: usize, model: usize) -> Result<f64>;
}
