// Latest-wins request coalescing with an out-of-order display guard.
//
// Rapid state changes collapse onto a single pending slot: at most
// `maxInFlight` (default 1) transport calls run at a time, and when one
// finishes only the newest pending state is dispatched next. Every dispatch
// gets a sequence number; a response is delivered only if its sequence is
// newer than the last delivered one, so a stale frame can never replace a
// newer one even if the transport completes out of order.

export interface Delivery<S, F> {
  state: S
  frame: F
  seq: number
  latencyMs: number
}

export interface CoalescerOptions {
  maxInFlight?: number
  now?: () => number
}

export class FrameCoalescer<S, F> {
  private pending: S | null = null
  private inFlight = 0
  private seqCounter = 0
  private deliveredSeq = 0
  private dispatched = 0
  private readonly maxInFlight: number
  private readonly now: () => number

  constructor(
    private readonly transport: (state: S) => Promise<F>,
    private readonly onFrame: (d: Delivery<S, F>) => void,
    private readonly onError: (err: unknown, state: S) => void = () => {},
    options: CoalescerOptions = {},
  ) {
    this.maxInFlight = options.maxInFlight ?? 1
    this.now = options.now ?? (() => Date.now())
  }

  /** Number of transport calls actually issued. */
  get requestCount(): number {
    return this.dispatched
  }

  get busy(): boolean {
    return this.inFlight > 0 || this.pending !== null
  }

  /** Replace whatever is waiting with the newest state and pump the queue. */
  submit(state: S): void {
    this.pending = state
    this.pump()
  }

  private pump(): void {
    if (this.pending === null || this.inFlight >= this.maxInFlight) return
    const state = this.pending
    this.pending = null
    const seq = ++this.seqCounter
    const started = this.now()
    this.inFlight += 1
    this.dispatched += 1
    this.transport(state).then(
      (frame) => {
        if (seq > this.deliveredSeq) {
          this.deliveredSeq = seq
          this.onFrame({ state, frame, seq, latencyMs: this.now() - started })
        }
      },
      (err) => {
        this.onError(err, state)
      },
    ).finally(() => {
      this.inFlight -= 1
      this.pump()
    })
  }
}
