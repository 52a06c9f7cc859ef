// DOM wiring: sliders, orbit drag on the frame, presets, latency readout.

import { ApiClient, ApiError } from './api.js'
import { FrameCoalescer } from './coalescer.js'
import { ViewerModel, ViewerState, SLIDER_LIMIT } from './state.js'

const api = new ApiClient('')

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing #${id}`)
  return node as T
}

async function boot(): Promise<void> {
  const status = el<HTMLDivElement>('status')
  let meta
  try {
    meta = await api.meta()
  } catch {
    status.textContent = 'service unreachable; retrying in 2s'
    setTimeout(boot, 2000)
    return
  }
  status.textContent = `${meta.n_splats} splats, ${meta.k_expr} expression channels`

  const model = new ViewerModel(meta)
  const img = el<HTMLImageElement>('frame')
  const latency = el<HTMLSpanElement>('latency')
  let lastUrl: string | null = null

  const coalescer = new FrameCoalescer<ViewerState, Blob>(
    async (state) => (await api.render(state)).blob,
    ({ frame, latencyMs }) => {
      const url = URL.createObjectURL(frame)
      img.src = url
      if (lastUrl) URL.revokeObjectURL(lastUrl)
      lastUrl = url
      latency.textContent = `${latencyMs.toFixed(0)} ms`
    },
    (err) => {
      status.textContent = err instanceof ApiError ? err.message : String(err)
    },
  )

  const request = () => coalescer.submit(model.snapshot())

  const sliders = el<HTMLDivElement>('sliders')
  const inputs: HTMLInputElement[] = []
  for (let i = 0; i < meta.k_expr; i++) {
    const row = document.createElement('label')
    row.className = 'slider-row'
    const input = document.createElement('input')
    input.type = 'range'
    input.min = String(-SLIDER_LIMIT)
    input.max = String(SLIDER_LIMIT)
    input.step = '0.01'
    input.value = '0'
    input.addEventListener('input', () => {
      model.setSlider(i, Number(input.value))
      request()
    })
    const name = document.createElement('span')
    name.textContent = `e${i}`
    row.append(name, input)
    sliders.append(row)
    inputs.push(input)
  }

  const presets = el<HTMLSelectElement>('presets')
  api.expressions().then((db) => {
    db.representatives.forEach((_, i) => {
      const opt = document.createElement('option')
      opt.value = String(i)
      opt.textContent = `expression ${i}`
      presets.append(opt)
    })
    presets.addEventListener('change', () => {
      const idx = Number(presets.value)
      if (!Number.isInteger(idx) || idx < 0) return
      model.loadPreset(db.representatives[idx])
      model.phi.forEach((v, i) => { inputs[i].value = String(v) })
      request()
    })
  })

  el<HTMLButtonElement>('reset').addEventListener('click', () => {
    model.loadPreset(new Array(meta.k_expr).fill(0))
    inputs.forEach((input) => { input.value = '0' })
    model.setOrbit(0, 0)
    request()
  })

  // orbit: drag over the frame maps to azimuth/elevation inside the ellipse
  let dragging = false
  img.addEventListener('pointerdown', (ev) => { dragging = true; img.setPointerCapture(ev.pointerId) })
  img.addEventListener('pointerup', () => { dragging = false })
  img.addEventListener('pointermove', (ev) => {
    if (!dragging) return
    const az = model.orbit.azimuth - ev.movementX * 0.35
    const elv = model.orbit.elevation + ev.movementY * 0.2
    model.setOrbit(az, elv)
    request()
  })

  request()
}

boot()
