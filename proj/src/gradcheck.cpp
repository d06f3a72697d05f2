#include "mixdiv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mixdiv/corpus.hpp"
#include "mixdiv/errors.hpp"
#include "mixdiv/mixup_train.hpp"
#include "mixdiv/model.hpp"

namespace mixdiv {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport check_gradients(const std::function<Tensor<double>()>& loss,
                                const std::vector<std::pair<std::string, Tensor<double>>>& params, double step,
                                double tolerance, Stencil stencil, const std::string& prefix) {
  if (!(step > 0.0)) throw ContractError("gradcheck: step must be positive");
  for (auto [name, t] : params) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw ContractError("gradcheck: " + name + " does not require a gradient");
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  GradcheckReport report;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double> t = params[p].second;
    GroupResult group;
    group.name = prefix + params[p].first;
    group.elements = t.numel();
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto at = [&](double offset) {
        data[i] = saved + offset;
        return loss().item();
      };
      double numeric = 0.0;
      if (stencil == Stencil::central) {
        numeric = (at(step) - at(-step)) / (2.0 * step);
      } else {
        numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      }
      data[i] = saved;
      const double err = relative_error(analytic[p][i], numeric);
      if (err > group.worst_error || i == 0) {
        group.worst_error = err;
        group.worst_index = i;
        group.analytic = analytic[p][i];
        group.numeric = numeric;
      }
    }
    group.passed = group.worst_error < tolerance;
    report.passed = report.passed && group.passed;
    report.worst_error = std::max(report.worst_error, group.worst_error);
    report.elements += group.elements;
    report.groups.push_back(std::move(group));
  }
  return report;
}

GradcheckReport run_gradcheck(const GradcheckConfig& config) {
  ModelConfig mc;
  mc.num_layers = config.num_layers;
  mc.num_heads = config.num_heads;
  mc.d_model = config.d_model;
  mc.d_ff = config.d_ff;
  mc.src_vocab = config.vocab;
  mc.tgt_vocab = config.vocab;
  mc.max_len = 16;
  mc.dropout = 0.0;
  mc.label_smoothing = config.label_smoothing;
  mc.validate();
  if (config.vocab <= static_cast<std::size_t>(kNumReserved)) {
    throw ContractError("gradcheck: vocab must exceed the reserved symbols");
  }

  RngStream rng(config.seed);
  Transformer<double> model(mc, Parameters<double>::initialize(mc, rng.derive("init")));
  RngStream data_rng = rng.derive("data");
  auto sentence = [&](std::size_t len) {
    TokenIds ids;
    for (std::size_t i = 0; i < len; ++i) {
      ids.push_back(kNumReserved + static_cast<int>(data_rng.uniform_index(config.vocab - kNumReserved)));
    }
    return ids;
  };
  // Target lengths 2 and 1 plus <eos>: 5 predicted tokens.
  const SentencePair a{sentence(3), sentence(2), 0};
  const SentencePair b{sentence(2), sentence(1), 1};
  const std::vector<const SentencePair*> batch{&a, &b};
  const std::vector<const SentencePair*> partners{&b, &a};
  const std::vector<double> lambdas{0.3, 0.8};

  const auto params = model.params().named();
  const auto plain_loss = [&] {
    return model.forward_train(build_plain_batch<double>(model, batch, mc.label_smoothing), {});
  };
  GradcheckReport report = check_gradients(plain_loss, params, config.step, config.tolerance, config.stencil, "plain ");
  if (config.mixup) {
    const auto mixed_loss = [&] {
      return model.forward_train(build_mixed_batch<double>(model, batch, partners, lambdas, mc.label_smoothing).batch,
                                 {});
    };
    const auto mixed = check_gradients(mixed_loss, params, config.step, config.tolerance, config.stencil, "mixup ");
    report.groups.insert(report.groups.end(), mixed.groups.begin(), mixed.groups.end());
    report.passed = report.passed && mixed.passed;
    report.worst_error = std::max(report.worst_error, mixed.worst_error);
    report.elements += mixed.elements;
  }
  return report;
}

std::string format_gradcheck_report(const GradcheckReport& report, double tolerance) {
  std::ostringstream out;
  std::size_t width = 0;
  for (const auto& g : report.groups) width = std::max(width, g.name.size());
  for (const auto& g : report.groups) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << g.name << std::right << std::setw(6) << g.elements
        << "  worst " << std::scientific << std::setprecision(3) << g.worst_error << "  at " << g.worst_index
        << " (analytic " << g.analytic << ", numeric " << g.numeric << ")  " << (g.passed ? "ok" : "FAIL") << '\n';
  }
  out << std::scientific << std::setprecision(3) << "worst relative error " << report.worst_error << " over "
      << report.elements << " elements, tolerance " << tolerance << ": " << (report.passed ? "PASS" : "FAIL") << '\n';
  return out.str();
}

}  // namespace mixdiv
