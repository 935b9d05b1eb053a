// World (meters, y up) <-> screen (pixels, y down) mapping with a fixed
// scale per scenario; dragging inverts rendering exactly.

export interface Viewport {
  width: number;
  height: number;
  scale: number; // pixels per meter
  centerX: number; // world point mapped to the canvas center
  centerY: number;
}

export interface WorldBounds {
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
}

export const DEFAULT_BOUNDS: WorldBounds = { xMin: -1.4, xMax: 1.4, yMin: -0.9, yMax: 1.3 };

export function makeViewport(width: number, height: number, bounds: WorldBounds = DEFAULT_BOUNDS): Viewport {
  const scale = Math.min(width / (bounds.xMax - bounds.xMin), height / (bounds.yMax - bounds.yMin));
  return {
    width,
    height,
    scale,
    centerX: (bounds.xMin + bounds.xMax) / 2,
    centerY: (bounds.yMin + bounds.yMax) / 2,
  };
}

export function worldToScreen(v: Viewport, x: number, y: number): [number, number] {
  return [v.width / 2 + (x - v.centerX) * v.scale, v.height / 2 - (y - v.centerY) * v.scale];
}

export function screenToWorld(v: Viewport, px: number, py: number): [number, number] {
  return [(px - v.width / 2) / v.scale + v.centerX, -(py - v.height / 2) / v.scale + v.centerY];
}

export function clampToBounds(bounds: WorldBounds, x: number, y: number): [number, number] {
  return [
    Math.min(Math.max(x, bounds.xMin), bounds.xMax),
    Math.min(Math.max(y, bounds.yMin), bounds.yMax),
  ];
}
