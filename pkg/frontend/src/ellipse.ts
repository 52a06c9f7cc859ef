// Orbit bounds: the service only trusts views inside the generation-time
// azimuth/elevation ellipse, so drags get projected back onto it.

export interface Orbit {
  azimuth: number
  elevation: number
}

export function insideEllipse(o: Orbit, psiMax: number, thetaMax: number): boolean {
  return (o.azimuth / psiMax) ** 2 + (o.elevation / thetaMax) ** 2 < 1
}

/** Project onto the ellipse boundary (slightly inside, matching the server's
 * strict interior check). Points already inside pass through unchanged. */
export function clampToEllipse(o: Orbit, psiMax: number, thetaMax: number): Orbit {
  const r = Math.sqrt((o.azimuth / psiMax) ** 2 + (o.elevation / thetaMax) ** 2)
  if (r < 1) return o
  const s = 0.999 / r
  return { azimuth: o.azimuth * s, elevation: o.elevation * s }
}
