#include "mdsep/trainer.hpp"

#include <cmath>
#include <sstream>

#include "mdsep/evalscore.hpp"

namespace mdsep {

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
    std::ostringstream out;
    out << "epoch,split,loss,accuracy\n";
    for (const auto& r : rows)
        out << r.epoch << "," << r.split << "," << r.loss << "," << r.accuracy << "\n";
    return out.str();
}

void apply_update(const ParamHandle& h, const Tensor<float>& grad, MomentumState& state,
                  double lr, double momentum, double weight_decay) {
    if (h.is_dw_slice) {
        Tensor<float> slice = dw_stack_slice(*h.tensor, h.slot);
        sgd_step(h.name, slice, grad, state, lr, momentum, weight_decay);
        dw_stack_set_slice(*h.tensor, h.slot, slice);
    } else {
        sgd_step(h.name, *h.tensor, grad, state, lr, momentum, weight_decay);
    }
}

EvalStats evaluate_split(Model& model, std::size_t d, const Dataset& ds, std::size_t batch_size,
                         bool gated) {
    if (ds.size() == 0) throw DataError("evaluate_split: empty dataset");
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        Batch b = gather_batch(ds, order, start, batch_size);
        Tensor<float> logits =
            gated ? model.forward_gated(b.images, nullptr) : model.forward(b.images, d, false);
        auto r = softmax_xent(logits, b.labels);
        loss += static_cast<double>(r.loss) * b.labels.size();
        for (std::size_t n = 0; n < b.labels.size(); ++n)
            if (argmax_row(logits, n) == static_cast<std::size_t>(b.labels[n])) ++correct;
    }
    EvalStats s;
    s.loss = loss / ds.size();
    s.accuracy = static_cast<double>(correct) / ds.size();
    return s;
}

namespace {

// classifier_only finetuning never changes the feature extractor, so the GAP
// features of every training image are computed once and the head trains on
// them directly.
TrainResult train_classifier_on_features(Model& model, std::size_t d, const Dataset& train,
                                         const Dataset* eval_split, const OptimConfig& opt,
                                         std::uint64_t seed) {
    const std::size_t n = train.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const std::size_t feat_dim = model.config().blocks.back().width;
    Tensor<float> feats({n, feat_dim});
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
        Batch b = gather_batch(train, order, start, opt.batch_size);
        ForwardCache cache;
        model.forward(b.images, d, false, &cache);
        for (std::size_t i = 0; i < b.labels.size(); ++i)
            for (std::size_t f = 0; f < feat_dim; ++f)
                feats.at2(start + i, f) = cache.gap_out.at2(i, f);
    }

    Tensor<float>& w = model.domain_params(d).cls_w;
    Tensor<float>& bias = model.domain_params(d).cls_b;
    const double wd = model.domain_spec(d).weight_decay;
    MomentumState ms;
    TrainResult result;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const double lr = lr_at(opt, epoch);
        auto shuffle = shuffled_indices(n, seed, epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            const std::size_t end = std::min(n, start + opt.batch_size);
            const std::size_t bs = end - start;
            Tensor<float> x({bs, feat_dim});
            std::vector<int> y;
            for (std::size_t i = 0; i < bs; ++i) {
                const std::size_t src = shuffle[start + i];
                for (std::size_t f = 0; f < feat_dim; ++f) x.at2(i, f) = feats.at2(src, f);
                y.push_back(train.labels[src]);
            }
            Tensor<float> logits = linear_forward(x, w, bias);
            auto r = softmax_xent(logits, y);
            if (!std::isfinite(static_cast<double>(r.loss)))
                throw NumericError("classifier training diverged (non-finite loss)");
            loss_sum += static_cast<double>(r.loss) * bs;
            for (std::size_t i = 0; i < bs; ++i)
                if (argmax_row(logits, i) == static_cast<std::size_t>(y[i])) ++correct;
            auto dlogits = softmax_xent_backward(r.probs, y);
            Tensor<float> dw, db;
            linear_backward(x, w, dlogits, static_cast<Tensor<float>*>(nullptr), &dw, &db);
            sgd_step("cls/w", w, dw, ms, lr, opt.momentum, wd);
            sgd_step("cls/b", bias, db, ms, lr, opt.momentum, 0.0);
        }
        result.metrics.push_back({epoch, "train", loss_sum / n,
                                  static_cast<double>(correct) / n});
        if (eval_split) {
            EvalStats es = evaluate_split(model, d, *eval_split, opt.batch_size, false);
            result.metrics.push_back({epoch, eval_split->split, es.loss, es.accuracy});
        }
    }
    return result;
}

}  // namespace

TrainResult train_phase(Model& model, Phase phase, std::size_t d, const Dataset& train,
                        const Dataset* eval_split, const OptimConfig& opt, std::uint64_t seed) {
    opt.validate();
    if (train.num_classes != model.domain_spec(d).num_classes)
        throw DataError("train_phase: dataset class count != domain class count");

    if (phase == Phase::finetune_domain && model.config().mode == SharingMode::classifier_only)
        return train_classifier_on_features(model, d, train, eval_split, opt, seed);

    const bool gated = phase == Phase::gate_train;
    const bool bn_train = !gated;
    const bool want_shared = phase == Phase::pretrain_base;
    const double wd = phase == Phase::finetune_domain ? model.domain_spec(d).weight_decay
                                                      : opt.weight_decay;
    auto handles = model.trainable_params(phase, d);
    MomentumState ms;
    TrainResult result;
    const std::size_t n = train.size();

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const double lr = lr_at(opt, epoch);
        auto order = shuffled_indices(n, seed, epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            Batch b = gather_batch(train, order, start, opt.batch_size);
            ForwardCache cache;
            Tensor<float> logits = gated ? model.forward_gated(b.images, &cache)
                                         : model.forward(b.images, d, bn_train, &cache);
            auto r = softmax_xent(logits, b.labels);
            if (!std::isfinite(static_cast<double>(r.loss)))
                throw NumericError("training diverged (non-finite loss)");
            loss_sum += static_cast<double>(r.loss) * b.labels.size();
            for (std::size_t i = 0; i < b.labels.size(); ++i)
                if (argmax_row(logits, i) == static_cast<std::size_t>(b.labels[i])) ++correct;

            if (gated)
                for (const auto& rb : cache.res)
                    for (const SepUnitCache* unit : {&rb.l1, &rb.l2})
                        if (unit->gated) {
                            double sum = 0.0;
                            for (std::size_t i = 0; i < unit->gate_cache.scales.size(); ++i)
                                sum += unit->gate_cache.scales[i];
                            result.worst_simplex_deviation =
                                std::max(result.worst_simplex_deviation, std::abs(sum - 1.0));
                        }

            auto dlogits = softmax_xent_backward(r.probs, b.labels);
            Grads g = gated ? model.backward_gated(cache, dlogits)
                            : model.backward(cache, dlogits, want_shared);
            for (const auto& h : handles) {
                auto it = g.find(h.name);
                if (it == g.end()) throw StateError("missing gradient for " + h.name);
                apply_update(h, it->second, ms, lr, opt.momentum, wd);
            }
        }
        result.metrics.push_back({epoch, "train", loss_sum / n,
                                  static_cast<double>(correct) / n});
        if (eval_split) {
            EvalStats es = evaluate_split(model, d, *eval_split, opt.batch_size, gated);
            result.metrics.push_back({epoch, eval_split->split, es.loss, es.accuracy});
        }
    }
    return result;
}

}  // namespace mdsep
