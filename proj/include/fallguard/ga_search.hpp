#pragma once
/**
 * Genetic search over single-hidden-layer detectors.
 *
 * A genome is (cell kind, hidden units). Each generation trains every genome for
 * eval_epochs and scores it on the validation split; elites survive unchanged and
 * the rest of the next population comes from tournament selection, crossover and
 * mutation. Training seeds derive from (seed, generation, slot), so evaluating a
 * generation in parallel gives the same result as evaluating it in order.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fallguard/parallel.hpp"
#include "fallguard/training.hpp"

namespace fallguard {

inline constexpr int kMinHiddenUnits = 30;
inline constexpr int kMaxHiddenUnits = 100;

struct Genome {
    nn::LayerKind kind = nn::LayerKind::GRU;
    int hidden_units = 50;

    bool operator==(const Genome&) const = default;
    std::string label() const { return std::string(nn::to_string(kind)) + "-" + std::to_string(hidden_units); }
    nn::NetworkSpec spec() const { return nn::NetworkSpec::detector(kind, hidden_units); }
};

struct GAConfig {
    std::size_t population = 10;
    std::size_t generations = 10;
    std::size_t eval_epochs = 100;
    double mutation_rate = 0.2;
    std::size_t elitism = 1;
    double weight_accuracy = 0.5;
    double weight_recall = 0.5;
    std::uint64_t seed = 1;
    unsigned workers = 1;

    void validate() const {
        if (population < 1 || generations < 1) throw UsageError("population and generations must be >= 1");
        if (elitism >= population) throw UsageError("elitism must be smaller than the population");
        if (!(mutation_rate >= 0.0 && mutation_rate <= 1.0)) throw UsageError("mutation_rate must lie in [0, 1]");
        if (!(weight_accuracy >= 0.0) || !(weight_recall >= 0.0) ||
            std::abs(weight_accuracy + weight_recall - 1.0) > 1e-9)
            throw UsageError("fitness weights must be non-negative and sum to 1");
    }
};

inline Json to_json(const GAConfig& c) {
    return Json{{"population", c.population},       {"generations", c.generations},
                {"eval_epochs", c.eval_epochs},     {"mutation_rate", c.mutation_rate},
                {"elitism", c.elitism},             {"weight_accuracy", c.weight_accuracy},
                {"weight_recall", c.weight_recall}, {"seed", c.seed}};
}

inline void read_json(JsonSection& s, GAConfig& c) {
    s.read("population", c.population);
    s.read("generations", c.generations);
    s.read("eval_epochs", c.eval_epochs);
    s.read("mutation_rate", c.mutation_rate);
    s.read("elitism", c.elitism);
    s.read("weight_accuracy", c.weight_accuracy);
    s.read("weight_recall", c.weight_recall);
    s.read("seed", c.seed);
}

inline bool in_bounds(const Genome& g) {
    return g.hidden_units >= kMinHiddenUnits && g.hidden_units <= kMaxHiddenUnits;
}

inline nn::LayerKind random_kind(Rng& rng) {
    static constexpr nn::LayerKind kinds[] = {nn::LayerKind::GRU, nn::LayerKind::LSTM, nn::LayerKind::BiLSTM};
    return kinds[uniform_int(rng, 0, 2)];
}

inline Genome random_genome(Rng& rng) {
    Genome g;
    g.kind = random_kind(rng);
    g.hidden_units = uniform_int(rng, kMinHiddenUnits, kMaxHiddenUnits);
    return g;
}

/// With probability `rate` resample the kind; independently with probability `rate`
/// shift hidden_units by a uniform integer in [-10, 10], clamped to the bounds.
inline Genome mutate(Genome g, double rate, Rng& rng) {
    if (uniform(rng, 0.0, 1.0) < rate) g.kind = random_kind(rng);
    if (uniform(rng, 0.0, 1.0) < rate)
        g.hidden_units = std::clamp(g.hidden_units + uniform_int(rng, -10, 10), kMinHiddenUnits, kMaxHiddenUnits);
    return g;
}

/// Kind from a uniformly chosen parent; hidden_units is the rounded midpoint.
inline Genome crossover(const Genome& a, const Genome& b, Rng& rng) {
    Genome child;
    child.kind = uniform_int(rng, 0, 1) ? a.kind : b.kind;
    child.hidden_units = static_cast<int>(std::lround(0.5 * (a.hidden_units + b.hidden_units)));
    return child;
}

struct FitnessResult {
    double fitness = 0.0;
    Metrics metrics;
    Model model;
};

/// Trains a single-hidden-layer detector for `train_cfg.epochs` and scores it on
/// the validation split. Training failures propagate with the genome named.
inline FitnessResult fitness(const Genome& g, const Dataset& ds, const TrainConfig& train_cfg,
                             double weight_accuracy = 0.5, double weight_recall = 0.5) {
    if (!in_bounds(g)) throw UsageError("genome " + g.label() + " is outside the hidden unit bounds");
    if (ds.task != Task::Detection) throw UsageError("architecture search needs a detection dataset");
    try {
        auto res = train(ds, g.spec(), train_cfg);
        const auto& rows = res.split.validation.empty() ? res.split.train : res.split.validation;
        FitnessResult out;
        out.metrics = evaluate(res.model.net, ds, &rows);
        out.fitness = weight_accuracy * out.metrics.accuracy + weight_recall * out.metrics.recall;
        out.model = std::move(res.model);
        return out;
    } catch (const Error& e) {
        throw Error(e.kind(), "fitness of genome " + g.label() + " failed: " + e.what());
    }
}

struct Evaluation {
    std::size_t generation = 0;
    std::size_t slot = 0;
    Genome genome;
    double fitness = 0.0;
    double accuracy = 0.0;
    double recall = 0.0;
};

inline Json to_json(const Evaluation& e) {
    return Json{{"generation", e.generation}, {"slot", e.slot},         {"kind", nn::to_string(e.genome.kind)},
                {"hidden_units", e.genome.hidden_units},                {"fitness", e.fitness},
                {"accuracy", e.accuracy},     {"recall", e.recall}};
}

struct SearchResult {
    Genome best;
    double best_fitness = -1.0;
    Model best_model;
    std::vector<std::vector<Evaluation>> history;  ///< [generation][slot]
    std::vector<double> best_so_far;               ///< per generation

    std::size_t evaluations() const {
        std::size_t n = 0;
        for (const auto& g : history) n += g.size();
        return n;
    }
};

using EvaluationCallback = std::function<void(const Evaluation&)>;

/// `base` supplies batch size, learning rate and validation fraction; its epochs
/// and seed are replaced per evaluation.
inline SearchResult search(const Dataset& ds, const GAConfig& cfg, const TrainConfig& base = {},
                           const EvaluationCallback& on_eval = {}) {
    cfg.validate();
    base.validate();
    Rng rng(derive_seed(cfg.seed, {0}));
    std::vector<Genome> population(cfg.population);
    for (auto& g : population) g = random_genome(rng);

    SearchResult result;
    for (std::size_t gen = 0; gen < cfg.generations; ++gen) {
        std::vector<FitnessResult> scored(population.size());
        parallel_for(population.size(), cfg.workers, [&](std::size_t slot) {
            TrainConfig tc = base;
            tc.epochs = cfg.eval_epochs;
            tc.seed = derive_seed(cfg.seed, {1, gen, slot});
            scored[slot] = fitness(population[slot], ds, tc, cfg.weight_accuracy, cfg.weight_recall);
        });

        auto& evals = result.history.emplace_back();
        for (std::size_t slot = 0; slot < population.size(); ++slot) {
            const auto& s = scored[slot];
            evals.push_back({gen, slot, population[slot], s.fitness, s.metrics.accuracy, s.metrics.recall});
            if (on_eval) on_eval(evals.back());
            if (s.fitness > result.best_fitness) {
                result.best_fitness = s.fitness;
                result.best = population[slot];
                result.best_model = std::move(scored[slot].model);
            }
        }
        result.best_so_far.push_back(result.best_fitness);
        if (gen + 1 == cfg.generations) break;

        std::vector<std::size_t> rank(population.size());
        for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
        std::stable_sort(rank.begin(), rank.end(),
                         [&](std::size_t a, std::size_t b) { return scored[a].fitness > scored[b].fitness; });
        auto tournament = [&]() -> const Genome& {
            const auto a = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(population.size()) - 1));
            const auto b = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(population.size()) - 1));
            const bool take_b = scored[b].fitness > scored[a].fitness || (scored[b].fitness == scored[a].fitness && b < a);
            return population[take_b ? b : a];
        };
        std::vector<Genome> next;
        next.reserve(population.size());
        for (std::size_t e = 0; e < cfg.elitism; ++e) next.push_back(population[rank[e]]);
        while (next.size() < population.size()) {
            const Genome& a = tournament();
            const Genome& b = tournament();
            next.push_back(mutate(crossover(a, b, rng), cfg.mutation_rate, rng));
        }
        population = std::move(next);
    }
    return result;
}

}  // namespace fallguard
