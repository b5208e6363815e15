import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    testTimeout: 120_000,
    hookTimeout: 300_000,
    // The full-size conversion test needs the worker's whole address space.
    pool: "forks",
    fileParallelism: false,
  },
});
