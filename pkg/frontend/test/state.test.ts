import { describe, expect, it } from 'vitest'

import { Meta } from '../src/api.js'
import { clampToEllipse, insideEllipse } from '../src/ellipse.js'
import { SLIDER_LIMIT, ViewerModel } from '../src/state.js'

const meta: Meta = {
  k_expr: 10,
  psi_max: 55,
  theta_max: 20,
  resolution: 64,
  n_splats: 1000,
  n_expressions: 24,
}

describe('ViewerModel', () => {
  it('creates one slider value per expression channel from meta', () => {
    const m = new ViewerModel(meta)
    expect(m.phi).toHaveLength(10)
    expect(m.phi.every((v) => v === 0)).toBe(true)
  })

  it('clamps sliders to the configured limit', () => {
    const m = new ViewerModel(meta)
    m.setSlider(3, 99)
    expect(m.phi[3]).toBe(SLIDER_LIMIT)
    m.setSlider(3, -99)
    expect(m.phi[3]).toBe(-SLIDER_LIMIT)
    expect(() => m.setSlider(10, 0)).toThrow(RangeError)
  })

  it('rejects presets of the wrong length', () => {
    const m = new ViewerModel(meta)
    expect(() => m.loadPreset([1, 2, 3])).toThrow(RangeError)
    const preset = new Array(10).fill(0.25)
    m.loadPreset(preset)
    expect(m.phi).toEqual(preset)
  })

  it('snapshot sends a zero phi vector when sliders are untouched', () => {
    const m = new ViewerModel(meta)
    const snap = m.snapshot()
    expect(snap.phi).toEqual(new Array(10).fill(0))
    expect(snap.azimuth).toBe(0)
    expect(snap.elevation).toBe(0)
  })

  it('orbit drags beyond the ellipse project onto the boundary', () => {
    const m = new ViewerModel(meta)
    m.setOrbit(80, 30)
    expect(insideEllipse(m.orbit, 55, 20)).toBe(true)
    const r = (m.orbit.azimuth / 55) ** 2 + (m.orbit.elevation / 20) ** 2
    expect(r).toBeGreaterThan(0.99 * 0.99)
    expect(r).toBeLessThan(1)
    // direction preserved
    expect(m.orbit.azimuth / m.orbit.elevation).toBeCloseTo(80 / 30, 10)
  })

  it('orbit inside the ellipse passes through unchanged', () => {
    const m = new ViewerModel(meta)
    m.setOrbit(10, -5)
    expect(m.orbit).toEqual({ azimuth: 10, elevation: -5 })
  })
})

describe('clampToEllipse', () => {
  it('boundary math matches the strict interior rule', () => {
    const out = clampToEllipse({ azimuth: 55, elevation: 0 }, 55, 20)
    expect(Math.abs(out.azimuth)).toBeLessThan(55)
    expect(insideEllipse(out, 55, 20)).toBe(true)
    const inside = clampToEllipse({ azimuth: 1, elevation: 1 }, 55, 20)
    expect(inside).toEqual({ azimuth: 1, elevation: 1 })
  })
})
