// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>
#include <vector>

#include "tppt/errors.hpp"
#include "tppt/rng.hpp"
#include "tppt/synthdata/synth.hpp"

namespace tppt::cl {

struct Task {
  int id = 0;
  std::vector<int> classes;
  std::vector<std::size_t> train;  // indices into the dataset's train split
  std::vector<std::size_t> test;   // indices into the dataset's test split
};

struct TaskStream {
  std::vector<Task> tasks;
  std::vector<int> class_order;
  std::uint64_t seed = 0;

  std::size_t size() const { return tasks.size(); }
};

/// Permutes the classes with `seed` and cuts the order into `num_tasks` equal groups.
inline TaskStream split_tasks(const synth::SynthDataset& ds, std::size_t num_tasks, std::uint64_t seed) {
  const std::size_t n = ds.num_classes();
  if (num_tasks == 0) throw ContractError("number of tasks must be positive");
  if (n % num_tasks != 0) {
    throw ContractError(std::to_string(n) + " classes cannot be split evenly into " + std::to_string(num_tasks) + " tasks");
  }
  TaskStream stream;
  stream.seed = seed;
  stream.class_order.resize(n);
  std::iota(stream.class_order.begin(), stream.class_order.end(), 0);
  Rng rng = Rng(seed).fork(31);
  rng.shuffle(stream.class_order);

  const std::size_t per_task = n / num_tasks;
  std::vector<int> task_of(n);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    Task task;
    task.id = static_cast<int>(t);
    for (std::size_t k = 0; k < per_task; ++k) {
      const int c = stream.class_order[t * per_task + k];
      task.classes.push_back(c);
      task_of[static_cast<std::size_t>(c)] = static_cast<int>(t);
    }
    stream.tasks.push_back(std::move(task));
  }
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    stream.tasks[static_cast<std::size_t>(task_of[static_cast<std::size_t>(ds.train[i].label)])].train.push_back(i);
  for (std::size_t i = 0; i < ds.test.size(); ++i)
    stream.tasks[static_cast<std::size_t>(task_of[static_cast<std::size_t>(ds.test[i].label)])].test.push_back(i);
  return stream;
}

}  // namespace tppt::cl
