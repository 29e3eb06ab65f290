// SPDX-License-Identifier: Apache-2.0
//
// Opaque stage backed by an external worker process.
//
// Wire protocol, one line per message:
//   worker -> us, once at startup:   {"in": <n>, "out": <m>, "params": <p>}
//   us -> worker, per query:         [x_1,...,x_n]            (p == 0)
//                                    [x_1,...,x_n] [t_1,...,t_p]
//   worker -> us, per query:         [y_1,...,y_m]
// Any line the worker writes to standard error aborts the pending query with
// BackendError carrying that line; the worker is then restarted.
#pragma once

#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "zobridge/stages.hpp"

namespace zobridge {

class SubprocessStage final : public Stage {
 public:
  struct Options {
    std::string block;          // parameter block name; required when the worker reports params > 0
    std::size_t pool_size = 1;  // identical workers serving queries concurrently
    std::chrono::milliseconds timeout{30000};
    std::string label = "subprocess";
  };

  SubprocessStage(std::vector<std::string> argv, Options options);
  explicit SubprocessStage(std::vector<std::string> argv) : SubprocessStage(std::move(argv), Options{}) {}
  ~SubprocessStage() override;

  SubprocessStage(const SubprocessStage&) = delete;
  SubprocessStage& operator=(const SubprocessStage&) = delete;

  std::string label() const override { return options_.label; }
  Index in_width() const override { return in_; }
  Index out_width() const override { return out_; }
  bool differentiable() const override { return false; }
  std::vector<BlockSpec> param_specs() const override;

  std::size_t restarts() const;

 protected:
  Vec do_forward(const Vec& x, Params params) const override;

 private:
  struct Worker;

  std::unique_ptr<Worker> spawn() const;
  Worker& acquire() const;
  void release(Worker& w) const;

  std::vector<std::string> argv_;
  Options options_;
  Index in_ = 0, out_ = 0, params_ = 0;

  mutable std::mutex mutex_;
  mutable std::condition_variable available_;
  mutable std::vector<std::unique_ptr<Worker>> workers_;
  mutable std::vector<bool> busy_;
  mutable std::size_t restarts_ = 0;
};

}  // namespace zobridge
