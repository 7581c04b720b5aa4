import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.e2e.ts"],
    globalSetup: ["tests/e2e.setup.ts"],
    testTimeout: 30_000,
    hookTimeout: 60_000,
  },
});
