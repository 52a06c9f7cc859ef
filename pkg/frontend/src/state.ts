// Viewer state: slider values sized from /meta, orbit within bounds, and
// the latest delivered frame.

import { Meta } from './api.js'
import { clampToEllipse, Orbit } from './ellipse.js'

export const SLIDER_LIMIT = 2.0

export interface ViewerState {
  phi: number[]
  azimuth: number
  elevation: number
  width: number
  height: number
}

export class ViewerModel {
  phi: number[]
  orbit: Orbit = { azimuth: 0, elevation: 0 }
  resolution: number

  constructor(readonly meta: Meta) {
    this.phi = new Array(meta.k_expr).fill(0)
    this.resolution = Math.max(meta.resolution, 256)
  }

  setSlider(index: number, value: number): void {
    if (index < 0 || index >= this.phi.length) throw new RangeError(`slider ${index}`)
    this.phi[index] = Math.max(-SLIDER_LIMIT, Math.min(SLIDER_LIMIT, value))
  }

  loadPreset(values: number[]): void {
    if (values.length !== this.phi.length) {
      throw new RangeError(`preset has ${values.length} values, expected ${this.phi.length}`)
    }
    values.forEach((v, i) => this.setSlider(i, v))
  }

  setOrbit(azimuth: number, elevation: number): void {
    this.orbit = clampToEllipse({ azimuth, elevation }, this.meta.psi_max, this.meta.theta_max)
  }

  snapshot(): ViewerState {
    return {
      phi: [...this.phi],
      azimuth: this.orbit.azimuth,
      elevation: this.orbit.elevation,
      width: this.resolution,
      height: this.resolution,
    }
  }
}
