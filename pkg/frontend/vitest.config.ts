import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["test/**/*.test.ts"],
    // the live-loop test spawns a model server and streams for five seconds
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
